"""Backtesting and reinforcement-learning toolkit for concentrated-liquidity provision."""

__version__ = "0.1.0"
