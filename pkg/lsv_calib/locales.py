"""Locales for lsv-calib."""

# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
# Copyright (c) 2024 Dean Thompson

import datetime as dt
import logging
import zoneinfo
from typing import Optional

from babel import Locale
from babel.dates import format_datetime
from babel.numbers import format_decimal, format_percent
from tzlocal import get_localzone

from lsv_calib import settings

logger = logging.getLogger(__name__)


class LocaleHelper:
    """Locale-aware formatting of counts, errors and timestamps for console output and reports."""

    def __init__(
        self,
        my_locale: Optional[Locale] = None,
        my_tz: Optional[zoneinfo.ZoneInfo] = None,
    ) -> None:
        """
        Args:
        - my_locale: Primary locale to use
        - my_tz: Primary timezone to use
        """
        self._locale = self._determine_locale(my_locale)
        self._timezone = self._determine_timezone(my_tz)

    @staticmethod
    def _determine_locale(my_locale: Optional[Locale] = None) -> Locale:
        if my_locale:
            if not isinstance(my_locale, Locale):
                raise TypeError("my_locale must be a babel Locale object")
            return my_locale
        try:
            default = Locale.default()
        except Exception:
            default = None
        if default is None:
            logger.debug("No system locale, falling back to %s", settings.FALLBACK_LOCALE)
            return Locale.parse(settings.FALLBACK_LOCALE, sep="-")
        return default

    @staticmethod
    def _determine_timezone(
        my_tz: Optional[zoneinfo.ZoneInfo] = None,
    ) -> zoneinfo.ZoneInfo:
        if my_tz is None:
            local_tz = get_localzone()
            if local_tz:
                assert isinstance(
                    local_tz, zoneinfo.ZoneInfo
                ), f"get_localzone() must return a ZoneInfo object, got {type(local_tz)}"
                return local_tz
        if my_tz:
            if not isinstance(my_tz, zoneinfo.ZoneInfo):
                raise TypeError("my_tz must be of type zoneinfo.ZoneInfo")
            return my_tz
        return zoneinfo.ZoneInfo("UTC")

    @property
    def locale(self) -> Locale:
        """Return locale."""
        return self._locale

    @property
    def timezone(self) -> zoneinfo.ZoneInfo:
        """Return timezone."""
        return self._timezone

    def format_count(self, count: int) -> str:
        """Path and step counts with grouping separators."""
        return format_decimal(count, locale=self.locale)

    def format_iv_error(self, error: float) -> str:
        """Implied-vol errors in basis points of vol, e.g. "12.5 bp"."""
        return f"{format_decimal(error * 1e4, format='#,##0.0', locale=self.locale)} bp"

    def format_share(self, share: float) -> str:
        return format_percent(share, format="#,##0.0%", locale=self.locale)

    def format_seconds(self, seconds: float) -> str:
        return f"{format_decimal(seconds, format='#,##0.0', locale=self.locale)} s"

    def format_datetime_str(self, my_datetime: dt.datetime) -> str:
        """Return formatted datetime string for given dt using locale."""
        return format_datetime(my_datetime, format="short", locale=self.locale)

    def now(self) -> dt.datetime:
        """Current time in the local timezone."""
        return dt.datetime.now(tz=self.timezone)

    def timestamp_str(self, my_datetime: Optional[dt.datetime] = None) -> str:
        """ISO 8601 timestamp with UTC offset, for report metadata."""
        my_datetime = my_datetime or self.now()
        return my_datetime.astimezone(self.timezone).isoformat(timespec="seconds")
