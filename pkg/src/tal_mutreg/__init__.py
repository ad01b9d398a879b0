"""Bottom-up temporal action localization with intra- and inter-phase
consistency regularizers, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
