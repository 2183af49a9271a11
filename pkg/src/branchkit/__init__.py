"""Conformer and E-Branchformer speech encoders on a small numpy autodiff engine.

Submodules: ``autodiff`` (tape and ops), ``nn`` (primitives and checkpoints),
``attention`` (relative-position MHA), ``encoders`` (layers, stacks, presets),
``ctc`` (loss and decoding), ``profiler`` (parameter/MAC accounting),
``harness`` (synthetic task, training, stability sweeps) and ``cli``.
"""

__version__ = "0.1.0"
