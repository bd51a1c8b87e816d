"""Monte Carlo calibration of neural leverage functions in SABR-type local stochastic volatility models"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

__version__ = "0.1.0"
