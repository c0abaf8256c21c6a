"""Path-composed modular language model training at desk scale.

Subpackages and modules:

- ``autodiff``: dense float64 tensors with reverse-mode differentiation
- ``model``: a small causal transformer LM built on the autodiff core
- ``optim``: AdamW / SGD inner optimizers, Nesterov outer optimizer
- ``modular``: levels, modules, paths and parameter partitioning
- ``routing``: prefix features, generative and discriminative routers, sharding
- ``trainer``: inner/outer training loop and its degenerate modes
- ``evaluation``: perplexity evaluation with optional per-chunk re-routing
- ``datagen``: deterministic synthetic multi-domain corpus generator
- ``harness``: in-process simulation of the distributed training fabric
- ``cli``: batch experiment commands
"""

__version__ = "0.1.0"
