"""Multi-task pre-finetuning: autodiff engine, small transformer, task losses,
heterogeneous batching and the experiment harness."""

__version__ = "0.1.0"
