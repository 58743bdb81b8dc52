"""Multi-task recommender learning with mutual sharing across task towers.

The library is built on a small tape-based reverse-mode autodiff engine
(`mutualrec.autodiff`) whose explicit stop-gradient primitive carries the
gradient-isolation guarantees of the cross-task head. On top of that sit
neural building blocks (`nn`), the multi-task backbones (`backbones`), the
cross-task tower head (`dml`), dataset ingestion (`data`), offline metrics
(`metrics`), and the experiment harness plus CLI (`harness`, `cli`).
"""

__version__ = "0.1.0"
