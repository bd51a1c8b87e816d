# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
# Copyright (c) 2024 Dean Thompson

import datetime as dt
import zoneinfo
from unittest import TestCase
from unittest.mock import patch

import babel
from babel import Locale
from tzlocal import get_localzone

from lsv_calib.locales import LocaleHelper

MODULE_PATH = "lsv_calib.locales"


class TestDetermineLocale(TestCase):
    def test_should_use_locale_when_provided(self):
        # given
        locale = Locale("en", "US")
        # when
        result = LocaleHelper._determine_locale(locale)
        # then
        self.assertEqual(result, locale)

    def test_should_reject_non_locale(self):
        with self.assertRaises(TypeError):
            LocaleHelper._determine_locale("en-US")

    def test_should_return_default_when_nothing_provided(self):
        # when
        with patch(MODULE_PATH + ".Locale", wraps=Locale) as spy:
            LocaleHelper._determine_locale()
            # then
            self.assertTrue(spy.default.called)

    def test_should_return_fallback_when_default_fails(self):
        # when
        with patch(MODULE_PATH + ".settings") as mock_settings:
            mock_settings.FALLBACK_LOCALE = "de-DE"
            with patch(MODULE_PATH + ".Locale.default") as mock:
                mock.side_effect = RuntimeError
                result = LocaleHelper._determine_locale()
        # then
        self.assertEqual(result, Locale("de", "DE"))


class TestLocaleHelper(TestCase):
    def test_should_init_with_defaults(self):
        # when
        locale_helper = LocaleHelper()
        # then
        self.assertEqual(locale_helper.timezone, get_localzone())

    def test_should_use_given_locale_and_timezone(self):
        # given
        my_locale = babel.Locale.parse("es-MX", sep="-")
        my_tz = zoneinfo.ZoneInfo("Asia/Bangkok")
        # when
        locale_helper = LocaleHelper(my_locale=my_locale, my_tz=my_tz)
        # then
        self.assertEqual(locale_helper.locale, my_locale)
        self.assertEqual(locale_helper.timezone, my_tz)

    def test_should_use_fallback_timezone_if_none_can_be_determined(self):
        # when
        with patch(MODULE_PATH + ".get_localzone") as mock_get_localzone:
            mock_get_localzone.return_value = None
            locale_helper = LocaleHelper()
        # then
        self.assertEqual(locale_helper.timezone, zoneinfo.ZoneInfo("UTC"))

    def test_should_format_datetime(self):
        # given
        locale_helper = LocaleHelper(my_locale=babel.Locale.parse("de-DE", sep="-"))
        # when
        result = locale_helper.format_datetime_str(dt.datetime(2021, 2, 3, 18, 10))
        # then
        self.assertEqual(result, "03.02.21, 18:10")

    def test_should_format_count_with_grouping(self):
        # given
        locale_helper = LocaleHelper(my_locale=babel.Locale.parse("de-DE", sep="-"))
        # when
        result = locale_helper.format_count(1000000)
        # then
        self.assertEqual(result, "1.000.000")

    def test_should_format_iv_error_in_basis_points(self):
        # given
        locale_helper = LocaleHelper(my_locale=babel.Locale.parse("en-US", sep="-"))
        # when
        result = locale_helper.format_iv_error(0.00125)
        # then
        self.assertEqual(result, "12.5 bp")

    def test_should_format_seconds(self):
        locale_helper = LocaleHelper(my_locale=babel.Locale.parse("en-US", sep="-"))
        self.assertEqual(locale_helper.format_seconds(1234.56), "1,234.6 s")

    def test_should_write_timestamp_with_offset(self):
        # given
        locale_helper = LocaleHelper(my_tz=zoneinfo.ZoneInfo("UTC"))
        my_datetime = dt.datetime(2024, 5, 6, 7, 8, 9, tzinfo=zoneinfo.ZoneInfo("UTC"))
        # when
        result = locale_helper.timestamp_str(my_datetime)
        # then
        self.assertEqual(result, "2024-05-06T07:08:09+00:00")
