"""LSTM recurrence kernels.

The compiled backend (``_lstm_cy``) is used when it imports; otherwise the
numpy implementation in ``_lstm_py`` is selected.  Setting
``AMPATTN_PURE_PYTHON=1`` forces the fallback.  Both backends share one
signature:

``lstm_forward(pre, w_hh) -> (hs, cs, acts)``
    ``pre`` is ``[T, B, 4H]`` (input projection plus bias, time-major),
    ``w_hh`` is ``[H, 4H]``.  ``acts`` holds the activated gates.
``lstm_backward(dhs, cs, acts, w_hh) -> dpre``
    adjoint of the pre-activations, ``[T, B, 4H]``.
"""

import os

from . import _lstm_py

BACKEND = "python"

if os.environ.get("AMPATTN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _lstm_cy as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _lstm_py
else:
    _impl = _lstm_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward

__all__ = ["BACKEND", "lstm_forward", "lstm_backward"]
