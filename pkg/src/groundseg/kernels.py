"""Kernel backend selection.

The compiled extension is preferred when importable. Set
GROUNDSEG_KERNELS=numpy to force the fallback, or =cython to make a missing
extension a hard error.
"""

import os

from . import _kernels_np

_requested = os.environ.get("GROUNDSEG_KERNELS", "").lower()

if _requested == "numpy":
    _impl = _kernels_np
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _kernels_np
        BACKEND = "numpy"

conv_out_size = _kernels_np.conv_out_size
im2col = _impl.im2col
col2im = _impl.col2im
label_components = _impl.label_components
