"""Differentiable substrate.

Tensors are plain ``torch.Tensor`` objects (batch, channel, height, width) and
reverse-mode gradients come from torch autograd.  This module adds the pieces
torch does not provide with the required contracts: a top-k with a fixed
tie-break, a central-difference gradient checker, a double-precision switch,
and a bitwise round-tripping checkpoint container.
"""
from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, InvalidArgument, NumericalFailure

CHECKPOINT_MAGIC = b"MOECKPT\x00"
CHECKPOINT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}
_DTYPE_NAMES = {v[0]: k for k, v in _DTYPES.items()}


def topk(scores: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Select the k largest entries along the last dimension.

    Ties go to the lowest index and the result is ordered by descending score.
    Values are gathered from ``scores``, so gradients reach only the selected
    entries.
    """
    n = scores.shape[-1]
    if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= n:
        raise InvalidArgument(f"top-k needs 1 <= k <= {n}, got k={k!r}")
    if not torch.isfinite(scores).all():
        raise InvalidArgument("top-k scores must be finite")
    # stable descending sort keeps the original (ascending index) order among ties
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    indices = order[..., :k]
    return indices, torch.gather(scores, -1, indices)


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pool (N, C, H, W) -> (N, C)."""
    return x.mean(dim=(2, 3))


@contextlib.contextmanager
def double_precision() -> Iterator[None]:
    """Temporarily make float64 the default dtype (used by gradient checks)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_difference_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd against central differences for every coordinate of x.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise InvalidArgument(f"step h must be positive, got {h}")
    base = x.detach().clone()
    xg = base.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise InvalidArgument("f must return a scalar")
    if not torch.isfinite(out).all():
        raise NumericalFailure(f"f(x) is not finite: {out.item()}")
    (analytic,) = torch.autograd.grad(out, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(base)
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    worst, worst_j = 0.0, -1
    with torch.no_grad():
        for j in range(flat.numel()):
            plus = flat.clone()
            plus[j] += h
            minus = flat.clone()
            minus[j] -= h
            fp = f(plus.view_as(base))
            fm = f(minus.view_as(base))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise NumericalFailure(f"f is not finite at coordinate {j} +/- {h}")
            numeric = (fp.item() - fm.item()) / (2 * h)
            err = abs(analytic[j].item() - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst, worst_j = err, j
    return GradCheckReport(worst, worst_j, tol)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def first_nonfinite(named: Mapping[str, torch.Tensor]) -> str | None:
    for name, t in named.items():
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def model_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Parameters and buffers by dotted path, including batch-norm statistics."""
    return {k: v.detach() for k, v in model.state_dict().items()}


# -- checkpoint container ----------------------------------------------------
#
# magic (8 bytes) | version u32 LE | header length u64 LE | header JSON | blob
# The header lists every tensor's dtype, shape and byte range inside the blob.


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path: str | os.PathLike,
    tensors: Mapping[str, torch.Tensor],
    config_digest: str,
    meta: dict | None = None,
) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype not in _DTYPE_NAMES:
            raise InvalidArgument(f"cannot store dtype {t.dtype} for {name}")
        dname = _DTYPE_NAMES[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config_digest": config_digest, "meta": meta or {}, "entries": entries},
        sort_keys=True,
    ).encode()
    payload = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)
    atomic_write_bytes(Path(path), payload)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, header)``; header carries ``config_digest`` and ``meta``."""
    data = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 12
    if len(data) < prefix or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC) : prefix])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[prefix : prefix + hlen])
    blob = memoryview(data)[prefix + hlen :]
    expected = sum(e["nbytes"] for e in header["entries"])
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(blob)}")
    tensors = {}
    for e in header["entries"]:
        dtype, np_dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + e["nbytes"]], dtype=np_dtype)
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(e["shape"]).to(dtype)
    return tensors, header


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)
