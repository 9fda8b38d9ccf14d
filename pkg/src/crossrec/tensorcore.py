"""Dense numeric primitives with explicit backward rules.

Parameters live in a ParameterStore as float32 matrices with paired Adam
moment buffers. Forward evaluation casts to float64 and a Tape records each
primitive so gradients can be replayed in reverse. Embedding gradients stay
sparse (per-row) so the optimizer never touches rows a batch did not read.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

INIT_STD = 0.01

CHECKPOINT_MAGIC = "CROSSREC-CKPT 1"


class ShapeError(ValueError):
    """Shape or index contract violation (a programming error, not bad data)."""


class NumericsError(ArithmeticError):
    """Non-finite value where a finite one is required."""


def seeded_rng(seed, *tags):
    """Generator derived from (seed, tags); tags keep parallel streams disjoint."""
    entropy = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            entropy.extend(tag.encode("utf-8"))
        else:
            entropy.append(int(tag))
    return np.random.default_rng(entropy)


class ParameterStore:
    """Named float32 matrices plus first/second Adam moments and a step counter.

    Shapes are fixed at creation and every entry is 2-D; names must be unique
    and whitespace-free (they key the checkpoint manifest).
    """

    def __init__(self):
        self._entries = {}
        self.step = 0

    def _add(self, name, value):
        if name in self._entries:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if any(ch.isspace() for ch in name) or "." in name:
            raise ShapeError(f"parameter name {name!r} may not contain whitespace or '.'")
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got {value.shape}")
        self._entries[name] = {
            "value": value,
            "m": np.zeros_like(value),
            "v": np.zeros_like(value),
        }

    def add_gaussian(self, name, shape, seed):
        """Add a weight drawn i.i.d. from N(0, INIT_STD^2), seeded per name."""
        rng = seeded_rng(seed, "init", name)
        self._add(name, rng.normal(0.0, INIT_STD, size=shape).astype(np.float32))

    def add_zeros(self, name, shape):
        self._add(name, np.zeros(shape, dtype=np.float32))

    def names(self):
        return list(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def shape(self, name):
        return self._entries[name]["value"].shape

    def value(self, name):
        """The live float32 array (mutations are visible to later forwards)."""
        return self._entries[name]["value"]

    def moments(self, name):
        e = self._entries[name]
        return e["m"], e["v"]

    def set_value(self, name, array):
        e = self._entries[name]["value"]
        array = np.asarray(array, dtype=np.float32)
        if array.shape != e.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to {name!r} {e.shape}")
        e[...] = array


@dataclass
class GradientBuffer:
    """Float64 gradients keyed by parameter name.

    Dense entries cover full matrices; row entries hold (sorted unique row
    ids, per-row gradients) for embedding tables, so untouched rows are
    simply absent.
    """

    dense: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)

    def names(self):
        return sorted(set(self.dense) | set(self.rows))

    def as_dense(self, store, name):
        """Materialize the gradient of `name` at full parameter shape."""
        full = np.zeros(store.shape(name), dtype=np.float64)
        if name in self.dense:
            full += self.dense[name]
        if name in self.rows:
            ids, g = self.rows[name]
            full[ids] += g
        return full


class Node:
    """A value in the computation, with a gradient slot filled during backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def bump(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def _as_ids(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"id array must be 1-D, got shape {ids.shape}")
    return ids


def _normalize_ragged(ragged):
    """Accept a list of id sequences or a (flat, segments, count) triple.

    Returns (flat, segments, count) with ids sorted within each segment so
    downstream sums are independent of the caller's ordering.
    """
    if isinstance(ragged, tuple) and len(ragged) == 3:
        flat, segments, count = ragged
        flat = _as_ids(flat)
        segments = _as_ids(segments)
    else:
        pieces = [_as_ids(seq) for seq in ragged]
        count = len(pieces)
        flat = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
        segments = np.repeat(np.arange(count, dtype=np.int64), [p.size for p in pieces])
    if flat.size:
        order = np.lexsort((flat, segments))
        flat = flat[order]
        segments = segments[order]
    return flat, segments, count


class Tape:
    """Records forward primitives for reverse-mode gradient accumulation.

    With record=False the same call surface computes values only, which is
    what evaluation uses. A tape is single-use: build one forward, call
    backward once.
    """

    def __init__(self, store, record=True):
        self.store = store
        self.recording = record
        self._ops = []          # (node, backward_fn(gout)) in forward order
        self._dense_grads = {}
        self._row_chunks = {}   # name -> list of (ids, grad) pieces
        self.relu_masks = []    # activation sign patterns, for smoothness checks

    # -- leaf reads ------------------------------------------------------

    def _leaf_dense(self, node, name):
        def back(g):
            acc = self._dense_grads.get(name)
            if acc is None:
                self._dense_grads[name] = g.copy()
            else:
                acc += g

        self._ops.append((node, back))

    def _leaf_rows(self, node, name, ids):
        def back(g):
            self._row_chunks.setdefault(name, []).append((ids, g))

        self._ops.append((node, back))

    def param(self, name):
        """Read a full parameter matrix as a float64 leaf node."""
        node = Node(self.store.value(name).astype(np.float64))
        if self.recording:
            self._leaf_dense(node, name)
        return node

    # -- primitives ------------------------------------------------------

    def embed_lookup(self, name, ids):
        ids = _as_ids(ids)
        table = self.store.value(name)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"row id out of range for {name!r} ({table.shape[0]} rows)")
        node = Node(table[ids].astype(np.float64))
        if self.recording:
            self._leaf_rows(node, name, ids)
        return node

    def embed_sum(self, name, ragged):
        """Per-segment sum of rows: output[s] = sum of table rows listed for s.

        Ids are summed in sorted order, so the result does not depend on how
        the caller ordered each segment; duplicated ids contribute (and
        receive gradient) once per occurrence.
        """
        flat, segments, count = _normalize_ragged(ragged)
        table = self.store.value(name)
        if flat.size and (flat.min() < 0 or flat.max() >= table.shape[0]):
            raise ShapeError(f"row id out of range for {name!r} ({table.shape[0]} rows)")
        rows = table[flat].astype(np.float64)
        out = np.zeros((count, table.shape[1]), dtype=np.float64)
        np.add.at(out, segments, rows)
        node = Node(out)
        if self.recording:
            def back(g, flat=flat, segments=segments, name=name):
                self._row_chunks.setdefault(name, []).append((flat, g[segments]))

            self._ops.append((node, back))
        return node

    def hadamard(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"hadamard shapes differ: {a.value.shape} vs {b.value.shape}")
        node = Node(a.value * b.value)
        if self.recording:
            def back(g, a=a, b=b):
                a.bump(g * b.value)
                b.bump(g * a.value)

            self._ops.append((node, back))
        return node

    def concat(self, parts):
        parts = list(parts)
        if not parts:
            raise ShapeError("concat of zero parts")
        rows = {p.value.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat row counts differ: {sorted(rows)}")
        node = Node(np.concatenate([p.value for p in parts], axis=1))
        if self.recording:
            widths = [p.value.shape[1] for p in parts]

            def back(g, parts=parts, widths=widths):
                at = 0
                for p, w in zip(parts, widths):
                    p.bump(g[:, at:at + w])
                    at += w

            self._ops.append((node, back))
        return node

    def dense(self, x, weight_name, bias_name=None):
        """Affine map x @ W (+ b).

        Width-1 outputs are reduced with numpy's pairwise row sum rather than
        BLAS so a single instance scores bit-identically whatever batch it
        rides in; wider outputs take the fast matmul.
        """
        w = self.store.value(weight_name).astype(np.float64)
        if x.value.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense input width {x.value.shape[1]} does not match "
                f"{weight_name!r} {w.shape}"
            )
        if w.shape[1] == 1:
            y = (x.value * w[:, 0]).sum(axis=1, keepdims=True)
        else:
            y = x.value @ w
        if bias_name is not None:
            b = self.store.value(bias_name).astype(np.float64)
            if b.shape != (1, w.shape[1]):
                raise ShapeError(f"bias {bias_name!r} must have shape (1, {w.shape[1]})")
            y = y + b
        node = Node(y)
        if self.recording:
            def back(g, x=x, w=w, weight_name=weight_name, bias_name=bias_name):
                dense = self._dense_grads
                dw = x.value.T @ g
                if weight_name in dense:
                    dense[weight_name] += dw
                else:
                    dense[weight_name] = dw
                if bias_name is not None:
                    db = g.sum(axis=0, keepdims=True)
                    if bias_name in dense:
                        dense[bias_name] += db
                    else:
                        dense[bias_name] = db
                x.bump(g @ w.T)

            self._ops.append((node, back))
        return node

    def relu(self, x):
        value = np.maximum(x.value, 0.0)
        node = Node(value)
        mask = x.value > 0.0
        self.relu_masks.append(mask)
        if self.recording:
            def back(g, x=x, mask=mask):
                x.bump(g * mask)

            self._ops.append((node, back))
        return node

    def sigmoid(self, x):
        v = x.value
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        node = Node(out)
        if self.recording:
            def back(g, x=x, out=out):
                x.bump(g * out * (1.0 - out))

            self._ops.append((node, back))
        return node

    def custom(self, value, parents, backward):
        """Record an op with a caller-supplied rule.

        backward(gout) must return one gradient array (or None) per parent.
        """
        node = Node(value)
        if self.recording:
            def back(g, parents=parents, backward=backward):
                for parent, grad in zip(parents, backward(g)):
                    if grad is not None:
                        parent.bump(grad)

            self._ops.append((node, back))
        return node

    # -- reverse pass ----------------------------------------------------

    def backward(self, out, seed_grad):
        """Run the reverse pass from `out` and return the gradient buffer."""
        if not self.recording:
            raise ShapeError("cannot run backward on a non-recording tape")
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != out.value.shape:
            raise ShapeError(
                f"seed gradient shape {seed_grad.shape} != output {out.value.shape}"
            )
        out.bump(seed_grad)
        for node, back in reversed(self._ops):
            if node.grad is not None:
                back(node.grad)
        buffer = GradientBuffer(dense=self._dense_grads)
        for name, chunks in self._row_chunks.items():
            ids = np.concatenate([c[0] for c in chunks])
            grads = np.concatenate([c[1] for c in chunks], axis=0)
            uniq, inverse = np.unique(ids, return_inverse=True)
            summed = np.zeros((uniq.size, grads.shape[1]), dtype=np.float64)
            np.add.at(summed, inverse, grads)
            buffer.rows[name] = (uniq, summed)
        self._ops = []
        self._dense_grads = {}
        self._row_chunks = {}
        return buffer


def adam_step(store, grads, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over the parameters present in `grads`.

    Row gradients only touch their own rows, so moments of embedding rows a
    batch never read are not decayed. The step counter advances once per
    call and is shared by every parameter.
    """
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    for name in grads.names():
        if name not in store:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        g = grads.dense.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        if name in grads.rows:
            _, rg = grads.rows[name]
            if not np.isfinite(rg).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")

    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t

    def apply(value, m, v, g):
        m64 = beta1 * m.astype(np.float64) + (1.0 - beta1) * g
        v64 = beta2 * v.astype(np.float64) + (1.0 - beta2) * g * g
        step = lr * (m64 / c1) / (np.sqrt(v64 / c2) + eps)
        return (
            (value.astype(np.float64) - step).astype(np.float32),
            m64.astype(np.float32),
            v64.astype(np.float32),
        )

    for name in grads.names():
        entry = store._entries[name]
        dense_g = grads.dense.get(name)
        row_entry = grads.rows.get(name)
        if row_entry is not None and dense_g is not None:
            # rare mixed case: fold the rows into one dense update
            g = grads.as_dense(store, name)
            value, m, v = apply(entry["value"], entry["m"], entry["v"], g)
            entry["value"][...] = value
            entry["m"][...] = m
            entry["v"][...] = v
        elif dense_g is not None:
            value, m, v = apply(entry["value"], entry["m"], entry["v"], dense_g)
            entry["value"][...] = value
            entry["m"][...] = m
            entry["v"][...] = v
        else:
            ids, g = row_entry
            value, m, v = apply(entry["value"][ids], entry["m"][ids], entry["v"][ids], g)
            entry["value"][ids] = value
            entry["m"][ids] = m
            entry["v"][ids] = v


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(path, store, header=None):
    """Write a text manifest plus raw little-endian float32 blocks.

    Per parameter the manifest lists three tensors (value and both moment
    buffers); byte offsets are relative to the end of the manifest. The
    round trip is bit-exact, so checkpoints can be checksummed.
    """
    header = dict(header or {})
    lines = [CHECKPOINT_MAGIC]
    for key in sorted(header):
        value = str(header[key])
        if "\n" in key or "\n" in value:
            raise ValueError("checkpoint header entries must be single-line")
        lines.append(f"meta {key} {value}")
    lines.append(f"step {store.step}")
    blocks = []
    offset = 0
    for name in store.names():
        entry = store._entries[name]
        rows, cols = entry["value"].shape
        for suffix, key in (("", "value"), (".m", "m"), (".v", "v")):
            data = np.ascontiguousarray(entry[key], dtype="<f4").tobytes()
            lines.append(f"tensor {name}{suffix} {rows} {cols} {offset}")
            blocks.append(data)
            offset += len(data)
    lines.append(f"data {offset}")
    lines.append("")
    payload = "\n".join(lines).encode("utf-8") + b"".join(blocks)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of save_checkpoint: returns (ParameterStore, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.index(b"\ndata ")
    end_of_manifest = blob.index(b"\n", cut + 1) + 1
    manifest = blob[:end_of_manifest].decode("utf-8").splitlines()
    data = blob[end_of_manifest:]
    if manifest[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a crossrec checkpoint")
    header = {}
    step = 0
    tensors = []
    for line in manifest[1:]:
        if not line:
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            header[key] = value
        elif kind == "step":
            step = int(rest)
        elif kind == "tensor":
            name, rows, cols, offset = rest.rsplit(" ", 3)
            tensors.append((name, int(rows), int(cols), int(offset)))
        elif kind == "data":
            if int(rest) != len(data):
                raise ValueError(f"{path}: truncated checkpoint payload")
    store = ParameterStore()
    store.step = step
    arrays = {}
    ordered = []
    for name, rows, cols, offset in tensors:
        nbytes = rows * cols * 4
        raw = np.frombuffer(data[offset:offset + nbytes], dtype="<f4")
        arrays[name] = raw.reshape(rows, cols).copy()
        if not name.endswith((".m", ".v")):
            ordered.append(name)
    for name in ordered:
        store._add(name, arrays[name])
        store._entries[name]["m"][...] = arrays[f"{name}.m"]
        store._entries[name]["v"][...] = arrays[f"{name}.v"]
    return store, header
