"""Process-guided concept bottleneck benchmark on a synthetic causal dataset.

Subpackages: tensor (autodiff engine), data (generator + container), model
(architecture and variants), loss (quantile loss suite + curriculum), train
(optimizer and two-stage protocol), evaluate (metrics and analyses), config
and cli (pipeline plumbing).
"""

__version__ = "0.1.0"
