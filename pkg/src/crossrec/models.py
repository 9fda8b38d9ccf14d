"""The five scoring architectures over a ParameterStore.

gmf     score = sigmoid(h . (p_u * q_i) + b)
mlp     score = sigmoid(out(relu stack over concat(p_u, q_i)))
neumf   independent GMF and MLP branches, fused by a linear layer whose
        weight splits into a GMF half and an MLP half
aadcf   entity embeddings pooled with their attribute embeddings pairwise,
        then an MLP over the pooled element-wise product
camf    gated blend of a shared user vector with the personal embedding,
        crossed against the item embedding and against aggregated item/user
        attribute embeddings, then an MLP over the concatenated products

All forwards are pure: they read the store through a Tape and mutate
nothing. Batched user/item index arrays score as a unit; attribute models
additionally take an AttributeCatalog.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc

KINDS = ("gmf", "mlp", "neumf", "aadcf", "camf")

SWEEP_FACTORS = (8, 16, 32)
DEFAULT_LAYERS = (32, 16, 8)


@dataclass
class ModelConfig:
    kind: str
    num_users: int
    num_items: int
    factors: int = 8
    mlp_layers: tuple = DEFAULT_LAYERS
    user_vocab_size: int = 0
    item_vocab_size: int = 0
    include_attr_cross: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        self.mlp_layers = tuple(int(w) for w in self.mlp_layers)
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.factors < 1:
            raise ValueError("factors must be positive")
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("num_users and num_items must be positive")
        if not self.mlp_layers or any(w < 1 for w in self.mlp_layers):
            raise ValueError("mlp_layers must be a non-empty sequence of positive widths")
        if self.uses_attributes and (self.user_vocab_size < 1 or self.item_vocab_size < 1):
            raise ValueError(f"{self.kind} needs user and item attribute vocabularies")

    @property
    def uses_attributes(self):
        return self.kind in ("aadcf", "camf")


def _mlp_shapes(width_in, layers):
    shapes = []
    for k, width in enumerate(layers):
        shapes.append((f"h{k}_w", (width_in, width), "gaussian"))
        shapes.append((f"h{k}_b", (1, width), "zeros"))
        width_in = width
    return shapes, width_in


def parameter_shapes(config):
    """Ordered (name, shape, init) triples for the given architecture."""
    d = config.factors
    shapes = []
    if config.kind == "gmf":
        shapes += [
            ("user_emb", (config.num_users, d), "gaussian"),
            ("item_emb", (config.num_items, d), "gaussian"),
            ("out_w", (d, 1), "gaussian"),
            ("out_b", (1, 1), "zeros"),
        ]
    elif config.kind == "mlp":
        shapes += [
            ("user_emb", (config.num_users, d), "gaussian"),
            ("item_emb", (config.num_items, d), "gaussian"),
        ]
        hidden, last = _mlp_shapes(2 * d, config.mlp_layers)
        shapes += hidden
        shapes += [("out_w", (last, 1), "gaussian"), ("out_b", (1, 1), "zeros")]
    elif config.kind == "neumf":
        shapes += [
            ("gmf_user_emb", (config.num_users, d), "gaussian"),
            ("gmf_item_emb", (config.num_items, d), "gaussian"),
            ("mlp_user_emb", (config.num_users, d), "gaussian"),
            ("mlp_item_emb", (config.num_items, d), "gaussian"),
        ]
        hidden, last = _mlp_shapes(2 * d, config.mlp_layers)
        shapes += hidden
        shapes += [
            ("out_w_gmf", (d, 1), "gaussian"),
            ("out_w_mlp", (last, 1), "gaussian"),
            ("out_b", (1, 1), "zeros"),
        ]
    elif config.kind == "aadcf":
        shapes += [
            ("user_emb", (config.num_users, d), "gaussian"),
            ("item_emb", (config.num_items, d), "gaussian"),
            ("user_attr_emb", (config.user_vocab_size, d), "gaussian"),
            ("item_attr_emb", (config.item_vocab_size, d), "gaussian"),
        ]
        hidden, last = _mlp_shapes(d, config.mlp_layers)
        shapes += hidden
        shapes += [("out_w", (last, 1), "gaussian"), ("out_b", (1, 1), "zeros")]
    elif config.kind == "camf":
        crosses = 4 if config.include_attr_cross else 3
        shapes += [
            ("user_emb", (config.num_users, d), "gaussian"),
            ("item_emb", (config.num_items, d), "gaussian"),
            ("user_attr_emb", (config.user_vocab_size, d), "gaussian"),
            ("item_attr_emb", (config.item_vocab_size, d), "gaussian"),
            ("u_shared", (1, d), "gaussian"),
            ("gate_w", (4 * d, 1), "gaussian"),
            ("gate_b", (1, 1), "zeros"),
        ]
        hidden, last = _mlp_shapes(crosses * d, config.mlp_layers)
        shapes += hidden
        shapes += [("out_w", (last, 1), "gaussian"), ("out_b", (1, 1), "zeros")]
    return shapes


def init_params(config, seed):
    """A fresh ParameterStore: weights ~ N(0, 0.01^2) per named stream, biases zero."""
    store = tc.ParameterStore()
    for name, shape, init in parameter_shapes(config):
        if init == "gaussian":
            store.add_gaussian(name, shape, seed)
        else:
            store.add_zeros(name, shape)
    return store


# -- ragged attribute gathers ----------------------------------------------


class RaggedRows:
    """CSR view over per-entity id lists with a vectorized batch gather."""

    def __init__(self, id_lists):
        lengths = np.array([len(ids) for ids in id_lists], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.flat = (
            np.concatenate([np.asarray(ids, dtype=np.int64) for ids in id_lists])
            if lengths.sum() else np.empty(0, dtype=np.int64)
        )

    def gather(self, selector):
        """Flat ids and segment indices for the selected entities."""
        selector = np.asarray(selector, dtype=np.int64)
        lengths = self.offsets[selector + 1] - self.offsets[selector]
        total = int(lengths.sum())
        segments = np.repeat(np.arange(selector.size, dtype=np.int64), lengths)
        starts = np.repeat(self.offsets[selector], lengths)
        within = np.arange(total, dtype=np.int64) - np.repeat(
            np.cumsum(lengths) - lengths, lengths
        )
        return self.flat[starts + within], segments, selector.size


def _catalog_ragged(catalog):
    # catalogs are immutable after load; cache the CSR views on the instance
    cache = getattr(catalog, "_ragged_cache", None)
    if cache is None:
        cache = (RaggedRows(catalog.user_attrs), RaggedRows(catalog.item_attrs))
        catalog._ragged_cache = cache
    return cache


# -- shared building blocks --------------------------------------------------


def _mlp_stack(tape, x, layers):
    for k in range(len(layers)):
        x = tape.relu(tape.dense(x, f"h{k}_w", f"h{k}_b"))
    return x


def _add(tape, a, b):
    return tape.custom(a.value + b.value, (a, b), lambda g: (g, g))


def pairwise_pool(entity, attrs):
    """Sum of all pairwise element-wise products among the entity and its attributes.

    Computed through the quadratic identity
    ((e + s) * (e + s) - e * e - sum_t g_t * g_t) / 2 with s = sum_t g_t,
    which costs O(V d) instead of O(V^2 d). With no attributes the entity
    vector is returned unchanged (an all-zero pool would erase the entity).
    """
    e = np.asarray(entity, dtype=np.float64)
    attrs = [np.asarray(a, dtype=np.float64) for a in attrs]
    if not attrs:
        return e.copy()
    g = np.stack(attrs)
    if g.shape[1:] != e.shape:
        raise tc.ShapeError(f"attribute shape {g.shape[1:]} != entity shape {e.shape}")
    s = g.sum(axis=0)
    t = e + s
    return (t * t - e * e - (g * g).sum(axis=0)) / 2.0


def _pool(tape, entity, table_name, ragged):
    """Batched pairwise pooling against embedding-table rows.

    `ragged` is (flat ids, segments, batch); ids are summed in sorted order
    per segment, and empty segments fall back to the entity row itself.
    """
    flat, segments, count = tc._normalize_ragged(ragged)
    if count != entity.value.shape[0]:
        raise tc.ShapeError("pool segment count does not match the entity batch")
    rows = tape.embed_lookup(table_name, flat)
    d = entity.value.shape[1]
    s = np.zeros((count, d), dtype=np.float64)
    np.add.at(s, segments, rows.value)
    sq = np.zeros((count, d), dtype=np.float64)
    np.add.at(sq, segments, rows.value * rows.value)
    e = entity.value
    t = e + s
    value = (t * t - e * e - sq) / 2.0
    present = np.zeros(count, dtype=bool)
    present[segments] = True
    empty = ~present
    if empty.any():
        value[empty] = e[empty]

    def backward(g):
        de = g * s
        if empty.any():
            de[empty] = g[empty]
        drows = g[segments] * (e[segments] + s[segments] - rows.value)
        return de, drows

    return tape.custom(value, (entity, rows), backward)


def camf_merge(u_shared, u_embedded, alpha):
    """Blend of the shared and personal user vectors: alpha*shared + (1-alpha)*personal."""
    u_shared = np.asarray(u_shared, dtype=np.float64)
    u_embedded = np.asarray(u_embedded, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha * u_shared + (1.0 - alpha) * u_embedded


def _merge(tape, shared, personal, alpha):
    """Tape version of camf_merge: shared is (1, d), personal (B, d), alpha (B, 1)."""
    a = alpha.value
    value = a * shared.value + (1.0 - a) * personal.value

    def backward(g):
        return (
            (g * a).sum(axis=0, keepdims=True),
            g * (1.0 - a),
            (g * (shared.value - personal.value)).sum(axis=1, keepdims=True),
        )

    return tape.custom(value, (shared, personal, alpha), backward)


# -- forwards ----------------------------------------------------------------


def gmf_forward(tape, users, items, linear_output=False):
    """sigmoid(h . (p_u * q_i) + b); linear_output skips the sigmoid (test hook)."""
    p = tape.embed_lookup("user_emb", users)
    q = tape.embed_lookup("item_emb", items)
    z = tape.dense(tape.hadamard(p, q), "out_w", "out_b")
    return z if linear_output else tape.sigmoid(z)


def mlp_forward(tape, config, users, items):
    p = tape.embed_lookup("user_emb", users)
    q = tape.embed_lookup("item_emb", items)
    x = _mlp_stack(tape, tape.concat([p, q]), config.mlp_layers)
    return tape.sigmoid(tape.dense(x, "out_w", "out_b"))


def neumf_forward(tape, config, users, items):
    """GMF and MLP branches on their own tables, fused by a split linear layer.

    The fused weight is stored as out_w_gmf / out_w_mlp halves; zeroing one
    half reduces the score to the other branch exactly.
    """
    pg = tape.embed_lookup("gmf_user_emb", users)
    qg = tape.embed_lookup("gmf_item_emb", items)
    z_gmf = tape.dense(tape.hadamard(pg, qg), "out_w_gmf", "out_b")
    pm = tape.embed_lookup("mlp_user_emb", users)
    qm = tape.embed_lookup("mlp_item_emb", items)
    x = _mlp_stack(tape, tape.concat([pm, qm]), config.mlp_layers)
    z_mlp = tape.dense(x, "out_w_mlp")
    return tape.sigmoid(_add(tape, z_gmf, z_mlp))


def aadcf_forward(tape, config, users, items, catalog):
    user_ragged, item_ragged = _catalog_ragged(catalog)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    p = _pool(
        tape, tape.embed_lookup("user_emb", users), "user_attr_emb",
        user_ragged.gather(users),
    )
    q = _pool(
        tape, tape.embed_lookup("item_emb", items), "item_attr_emb",
        item_ragged.gather(items),
    )
    x = _mlp_stack(tape, tape.hadamard(p, q), config.mlp_layers)
    return tape.sigmoid(tape.dense(x, "out_w", "out_b"))


def _camf_parts(tape, users, items, catalog):
    user_ragged, item_ragged = _catalog_ragged(catalog)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    p = tape.embed_lookup("user_emb", users)
    q = tape.embed_lookup("item_emb", items)
    a_u = tape.embed_sum("user_attr_emb", user_ragged.gather(users))
    a_i = tape.embed_sum("item_attr_emb", item_ragged.gather(items))
    z = tape.concat([p, a_u, q, a_i])
    alpha = tape.sigmoid(tape.dense(z, "gate_w", "gate_b"))
    return p, q, a_u, a_i, alpha


def camf_gate(tape, users, items, catalog):
    """The blend weight alpha = sigmoid(w . [p_u, a_u, q_i, a_i] + b), per pair."""
    return _camf_parts(tape, users, items, catalog)[4]


def camf_forward(tape, config, users, items, catalog):
    """Gated user vector crossed with the item embedding and both attribute sums.

    Aggregating attributes before the product equals summing per-attribute
    products, since the element-wise product distributes over addition.
    """
    p, q, a_u, a_i, alpha = _camf_parts(tape, users, items, catalog)
    merged = _merge(tape, tape.param("u_shared"), p, alpha)
    crosses = [
        tape.hadamard(merged, q),
        tape.hadamard(merged, a_i),
        tape.hadamard(q, a_u),
    ]
    if config.include_attr_cross:
        crosses.append(tape.hadamard(a_u, a_i))
    x = _mlp_stack(tape, tape.concat(crosses), config.mlp_layers)
    return tape.sigmoid(tape.dense(x, "out_w", "out_b"))


def score(tape, config, users, items, catalog=None, linear_output=False):
    """Dispatch to the configured architecture; returns the (B, 1) output node."""
    if config.kind == "gmf":
        return gmf_forward(tape, users, items, linear_output=linear_output)
    if linear_output:
        raise ValueError("linear_output is a gmf-only hook")
    if config.kind == "mlp":
        return mlp_forward(tape, config, users, items)
    if config.kind == "neumf":
        return neumf_forward(tape, config, users, items)
    if catalog is None:
        raise ValueError(f"{config.kind} requires an attribute catalog")
    if config.kind == "aadcf":
        return aadcf_forward(tape, config, users, items, catalog)
    return camf_forward(tape, config, users, items, catalog)


def predictions(node):
    """Scores as a flat float64 array."""
    return node.value[:, 0]
