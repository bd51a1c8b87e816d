# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
