# MIT License
#
# Copyright (c) 2024 Dean Thompson

import math
import unittest

from lsv_calib import helpers
from tests.helpers import temp_dir


class TestJsonFiles(unittest.TestCase):
    def test_should_write_and_read_json(self):
        # given
        path = temp_dir() / "data.json"
        obj = {"b": [1, 2.5], "a": None}
        # when
        helpers.write_json_file(obj, path)
        result = helpers.read_json_file(path)
        # then
        self.assertEqual(result, obj)
        self.assertTrue(path.read_text(encoding="utf-8").endswith("}\n"))

    def test_should_return_none_for_missing_file(self):
        self.assertIsNone(helpers.read_json_file(temp_dir() / "missing.json", quiet=True))

    def test_should_return_none_for_invalid_json(self):
        # given
        path = temp_dir() / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        # when/then
        self.assertIsNone(helpers.read_json_file(path, quiet=True))


class TestCsvFiles(unittest.TestCase):
    def test_should_keep_full_float_precision(self):
        # given
        path = temp_dir() / "values.csv"
        value = 0.1 + 0.2
        # when
        helpers.write_csv_file(path, ("name", "value"), [("x", value), ("y", math.nan)])
        header, rows = helpers.read_csv_file(path)
        # then
        self.assertEqual(header, ["name", "value"])
        self.assertEqual(float(rows[0][1]), value)
        self.assertTrue(math.isnan(float(rows[1][1])))

    def test_should_use_unix_line_ends(self):
        # given
        path = temp_dir() / "values.csv"
        # when
        helpers.write_csv_file(path, ("a",), [(1,), (2,)])
        # then
        self.assertEqual(path.read_bytes(), b"a\n1\n2\n")


class TestGitBlobHash(unittest.TestCase):
    def test_should_match_git_hash_object(self):
        # given
        path = temp_dir() / "hello.txt"
        path.write_bytes(b"hello\n")
        # when
        result = helpers.git_blob_hash(path)
        # then
        self.assertEqual(result, "ce013625030ba8dba906f756967f9e9ca394464a")

    def test_should_hash_empty_file(self):
        path = temp_dir() / "empty"
        path.write_bytes(b"")
        self.assertEqual(helpers.git_blob_hash(path), "e69de29bb2d1d6cf4a41c7e08b04d1ee8aa1a6f1")
