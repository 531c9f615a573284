"""Reader/writer for the ``TDMP`` binary tensor dump.

Layout (all little-endian)::

    b"TDMP" | u32 ndim | u64 dim[0] ... u64 dim[ndim-1] | f64 payload (row-major)

Integer tensors (token ids, masks) are stored as float64 too; ids up to
2**53 round-trip exactly.
"""

import struct

import numpy as np

MAGIC = b"TDMP"


def dumps(array):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf):
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise ValueError("not a TDMP buffer (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    dims = struct.unpack_from("<" + "Q" * ndim, buf, offset)
    offset += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + 8 * count
    if len(buf) != expected:
        raise ValueError(f"TDMP payload size mismatch: {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
