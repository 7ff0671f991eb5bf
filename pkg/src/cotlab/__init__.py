"""Numerical laboratory for a linear-attention account of chain-of-thought.

The package is organized around a two-layer noisy regression task solved
in-context by single-head attention. ``synthdata`` samples tasks and builds
prompt matrices, ``attention`` implements structured and dense predictors
with analytic gradients, ``theory`` holds the closed-form expected losses,
``montecarlo`` estimates losses empirically and trains models from scratch,
``expcli`` drives canned experiments from TOML configs, and ``promptbench``
is an error-aware few-shot evaluation harness for external chat models.
"""

__version__ = "0.1.0"
