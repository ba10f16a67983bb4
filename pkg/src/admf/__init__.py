"""Forecasting asset dependency matrices (rolling correlation/covariance).

Subpackages follow the pipeline: :mod:`admf.data` builds ADM sequences,
:mod:`admf.rearrange` orders assets, :mod:`admf.transform` and
:mod:`admf.forecaster` hold the neural blocks, :mod:`admf.training` trains
and scores them, :mod:`admf.synth` simulates markets and
:mod:`admf.applications` turns forecasts into portfolios and pair trades.
"""
from admf._core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
