"""Dataset ingestion: parsing, attribute encoding, and the leave-one-out split.

Two on-disk layouts are understood: the MovieLens-1M "::"-separated trio
(ratings/users/movies) and a generic UTF-8 tab-separated layout for
pin-style data (interactions plus per-entity attribute name files, with an
optional category consolidation map). Every rating or pin becomes an
implicit positive; raw ids are remapped to dense 0-based indices sorted by
raw id so the mapping is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import seeded_rng


class CorpusError(Exception):
    """Base for dataset ingestion failures."""


class ParseError(CorpusError):
    """A record that does not match the expected layout (names the line)."""


class LoadError(CorpusError):
    """Structurally valid input that violates a dataset-level requirement."""


class SplitError(CorpusError):
    """Leave-one-out preconditions not met."""


@dataclass
class InteractionSet:
    """Deduplicated (user, item, timestamp) triples over dense 0-based ids."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    per_user_items: list = field(repr=False)

    @classmethod
    def from_arrays(cls, num_users, num_items, users, items, timestamps):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if not (len(users) == len(items) == len(timestamps)):
            raise LoadError("interaction columns have mismatched lengths")
        if len(users) and (users.min() < 0 or users.max() >= num_users):
            raise LoadError("user id out of range")
        if len(items) and (items.min() < 0 or items.max() >= num_items):
            raise LoadError("item id out of range")
        encoded = users * num_items + items
        if np.unique(encoded).size != encoded.size:
            raise LoadError("duplicate (user, item) pair")
        per_user = [None] * num_users
        order = np.argsort(encoded, kind="stable")
        sorted_users = users[order]
        sorted_items = items[order]
        bounds = np.searchsorted(sorted_users, np.arange(num_users + 1))
        for u in range(num_users):
            per_user[u] = sorted_items[bounds[u]:bounds[u + 1]]
        return cls(num_users, num_items, users, items, timestamps, per_user)

    def __len__(self):
        return len(self.users)


@dataclass
class AttributeCatalog:
    """Per-entity attribute id sets with their vocabulary sizes.

    Attribute id lists are stored sorted; every user and item carries at
    least one attribute (checked at load).
    """

    user_attrs: list
    item_attrs: list
    user_vocab_size: int
    item_vocab_size: int

    def __post_init__(self):
        self.user_attrs = [np.sort(np.asarray(a, dtype=np.int64)) for a in self.user_attrs]
        self.item_attrs = [np.sort(np.asarray(a, dtype=np.int64)) for a in self.item_attrs]
        for label, attrs, vocab in (
            ("user", self.user_attrs, self.user_vocab_size),
            ("item", self.item_attrs, self.item_vocab_size),
        ):
            for idx, ids in enumerate(attrs):
                if ids.size == 0:
                    raise LoadError(f"{label} {idx} has zero attributes")
                if ids.min() < 0 or ids.max() >= vocab:
                    raise LoadError(f"{label} {idx} attribute id outside vocabulary ({vocab})")


@dataclass
class SplitDataset:
    """Leave-one-out split: train set plus one positive and 99 negatives per user."""

    train: InteractionSet
    test_positives: np.ndarray       # (num_users,)
    test_negatives: np.ndarray       # (num_users, 99)

    def full_user_items(self, user):
        """Sorted items the user interacted with anywhere (train or test)."""
        return np.union1d(self.train.per_user_items[user], [self.test_positives[user]])


@dataclass
class ParsedData:
    interactions: InteractionSet
    catalog: AttributeCatalog
    raw_user_ids: np.ndarray   # raw_user_ids[k] is the raw id mapped to dense id k
    raw_item_ids: np.ndarray


NUM_TEST_NEGATIVES = 99


def _read_lines(path, encoding="utf-8"):
    with open(path, "r", encoding=encoding) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _parse_int(text, path, lineno, what):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {what} is not an integer: {text!r}") from None


def _dedupe_triples(raw_users, raw_items, timestamps):
    """Keep the first occurrence of each (user, item) pair, preserving order."""
    seen = set()
    keep = []
    for idx, pair in enumerate(zip(raw_users, raw_items)):
        if pair not in seen:
            seen.add(pair)
            keep.append(idx)
    keep = np.asarray(keep, dtype=np.int64)
    return (
        np.asarray(raw_users, dtype=np.int64)[keep],
        np.asarray(raw_items, dtype=np.int64)[keep],
        np.asarray(timestamps, dtype=np.int64)[keep],
    )


def _remap(raw_values):
    """Dense 0-based ids assigned in ascending raw-id order."""
    uniq = np.unique(raw_values)
    lookup = {int(raw): idx for idx, raw in enumerate(uniq)}
    return uniq, lookup


def parse_movielens(ratings_path, users_path, items_path):
    """Parse the MovieLens-1M trio into interactions and attributes.

    Any rating value counts as an implicit positive. User attributes are the
    {gender, age bucket, occupation} triple encoded against per-field
    vocabularies; item attributes are the movie's genres. Titles may be
    ISO-8859-1 and are discarded.
    """
    raw_users, raw_items, stamps = [], [], []
    for lineno, line in _read_lines(ratings_path, encoding="iso-8859-1"):
        fields = line.split("::")
        if len(fields) != 4:
            raise ParseError(f"{ratings_path}:{lineno}: expected 4 '::' fields, got {len(fields)}")
        u = _parse_int(fields[0], ratings_path, lineno, "user id")
        i = _parse_int(fields[1], ratings_path, lineno, "movie id")
        _parse_int(fields[2], ratings_path, lineno, "rating")
        t = _parse_int(fields[3], ratings_path, lineno, "timestamp")
        raw_users.append(u)
        raw_items.append(i)
        stamps.append(t)
    if not raw_users:
        raise LoadError(f"{ratings_path}: no interactions")
    raw_users, raw_items, stamps = _dedupe_triples(raw_users, raw_items, stamps)

    user_ids, user_map = _remap(raw_users)
    item_ids, item_map = _remap(raw_items)

    # users.dat: UserID::Gender::Age::Occupation::Zip
    user_fields = {}
    for lineno, line in _read_lines(users_path, encoding="iso-8859-1"):
        fields = line.split("::")
        if len(fields) != 5:
            raise ParseError(f"{users_path}:{lineno}: expected 5 '::' fields, got {len(fields)}")
        raw = _parse_int(fields[0], users_path, lineno, "user id")
        if raw in user_map:
            user_fields[raw] = (fields[1], fields[2], fields[3])
    missing = [int(raw) for raw in user_ids if int(raw) not in user_fields]
    if missing:
        raise LoadError(f"{users_path}: user {missing[0]} has zero attributes (no record)")

    genders = sorted({v[0] for v in user_fields.values()})
    ages = sorted({v[1] for v in user_fields.values()}, key=int)
    occupations = sorted({v[2] for v in user_fields.values()}, key=int)
    age_base = len(genders)
    occ_base = age_base + len(ages)
    user_vocab = occ_base + len(occupations)
    user_attrs = []
    for raw in user_ids:
        g, a, o = user_fields[int(raw)]
        user_attrs.append(
            [genders.index(g), age_base + ages.index(a), occ_base + occupations.index(o)]
        )

    # movies.dat: MovieID::Title::Genre|Genre|...
    item_genres = {}
    for lineno, line in _read_lines(items_path, encoding="iso-8859-1"):
        fields = line.split("::")
        if len(fields) != 3:
            raise ParseError(f"{items_path}:{lineno}: expected 3 '::' fields, got {len(fields)}")
        raw = _parse_int(fields[0], items_path, lineno, "movie id")
        if raw in item_map:
            item_genres[raw] = sorted({g for g in fields[2].split("|") if g})
    missing = [int(raw) for raw in item_ids if int(raw) not in item_genres or not item_genres[int(raw)]]
    if missing:
        raise LoadError(f"{items_path}: item {missing[0]} has zero attributes")

    genre_vocab = sorted({g for gs in item_genres.values() for g in gs})
    genre_index = {g: idx for idx, g in enumerate(genre_vocab)}
    item_attrs = [[genre_index[g] for g in item_genres[int(raw)]] for raw in item_ids]

    interactions = InteractionSet.from_arrays(
        len(user_ids), len(item_ids),
        [user_map[int(u)] for u in raw_users],
        [item_map[int(i)] for i in raw_items],
        stamps,
    )
    catalog = AttributeCatalog(user_attrs, item_attrs, user_vocab, len(genre_vocab))
    return ParsedData(interactions, catalog, user_ids, item_ids)


def bucketize(count, bucket_size):
    """The 0-based group of a count under fixed-size grouping: floor((count-1)/size)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if bucket_size < 1:
        raise ValueError(f"bucket_size must be >= 1, got {bucket_size}")
    return (count - 1) // bucket_size


def item_pin_attribute(interactions, bucket_size):
    """Per-item popularity bucket from interaction-weighted exposure.

    An item's exposure is the sum, over every user who interacted with it,
    of that user's total interaction count; items nobody touched land in
    bucket 0.
    """
    user_counts = np.array([len(v) for v in interactions.per_user_items], dtype=np.int64)
    pins = np.zeros(interactions.num_items, dtype=np.int64)
    np.add.at(pins, interactions.items, user_counts[interactions.users])
    buckets = np.zeros(interactions.num_items, dtype=np.int64)
    touched = pins > 0
    buckets[touched] = (pins[touched] - 1) // bucket_size
    return buckets


def _read_attr_file(path, category_map):
    attrs = {}
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        raw = _parse_int(fields[0], path, lineno, "entity id")
        name = fields[1]
        if category_map is not None:
            if name not in category_map:
                raise LoadError(f"{path}:{lineno}: unmapped category {name!r}")
            name = category_map[name]
        attrs.setdefault(raw, set()).add(name)
    return attrs


def _read_category_map(path):
    mapping = {}
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        raw, main = fields
        if raw in mapping and mapping[raw] != main:
            raise LoadError(f"{path}:{lineno}: category {raw!r} mapped twice")
        mapping[raw] = main
    return mapping


def parse_generic(
    interactions_path,
    user_attr_path,
    item_attr_path,
    category_map_path=None,
    min_user_interactions=10,
    user_bucket_size=40,
    item_bucket_size=50,
):
    """Parse tab-separated interaction and attribute files.

    Users with fewer than `min_user_interactions` interactions are dropped
    before ids are remapped. File-listed attribute names (collapsed through
    the category map when one is given) are encoded first; each user then
    gets an interaction-count bucket and each item an exposure bucket, so
    entities without listed attributes still carry one.
    """
    raw_users, raw_items, stamps = [], [], []
    for lineno, line in _read_lines(interactions_path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(
                f"{interactions_path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        raw_users.append(_parse_int(fields[0], interactions_path, lineno, "user id"))
        raw_items.append(_parse_int(fields[1], interactions_path, lineno, "item id"))
        stamps.append(_parse_int(fields[2], interactions_path, lineno, "timestamp"))
    if not raw_users:
        raise LoadError(f"{interactions_path}: no interactions")
    raw_users, raw_items, stamps = _dedupe_triples(raw_users, raw_items, stamps)

    uniq, counts = np.unique(raw_users, return_counts=True)
    kept = {int(u) for u, c in zip(uniq, counts) if c >= min_user_interactions}
    if not kept:
        raise LoadError(f"{interactions_path}: empty dataset after the >= {min_user_interactions} filter")
    mask = np.fromiter((int(u) in kept for u in raw_users), dtype=bool, count=len(raw_users))
    raw_users, raw_items, stamps = raw_users[mask], raw_items[mask], stamps[mask]

    user_ids, user_map = _remap(raw_users)
    item_ids, item_map = _remap(raw_items)
    interactions = InteractionSet.from_arrays(
        len(user_ids), len(item_ids),
        [user_map[int(u)] for u in raw_users],
        [item_map[int(i)] for i in raw_items],
        stamps,
    )

    category_map = _read_category_map(category_map_path) if category_map_path else None
    user_named = _read_attr_file(user_attr_path, category_map)
    item_named = _read_attr_file(item_attr_path, category_map)

    user_names = sorted({n for raw, names in user_named.items() if raw in user_map for n in names})
    item_names = sorted({n for raw, names in item_named.items() if raw in item_map for n in names})
    user_name_index = {n: i for i, n in enumerate(user_names)}
    item_name_index = {n: i for i, n in enumerate(item_names)}

    user_buckets = np.array(
        [bucketize(len(interactions.per_user_items[u]), user_bucket_size)
         for u in range(interactions.num_users)],
        dtype=np.int64,
    )
    item_buckets = item_pin_attribute(interactions, item_bucket_size)

    user_bucket_base = len(user_names)
    item_bucket_base = len(item_names)
    user_vocab = user_bucket_base + int(user_buckets.max()) + 1
    item_vocab = item_bucket_base + int(item_buckets.max()) + 1

    user_attrs = []
    for dense, raw in enumerate(user_ids):
        ids = [user_name_index[n] for n in user_named.get(int(raw), ())]
        ids.append(user_bucket_base + int(user_buckets[dense]))
        user_attrs.append(ids)
    item_attrs = []
    for dense, raw in enumerate(item_ids):
        ids = [item_name_index[n] for n in item_named.get(int(raw), ())]
        ids.append(item_bucket_base + int(item_buckets[dense]))
        item_attrs.append(ids)

    catalog = AttributeCatalog(user_attrs, item_attrs, user_vocab, item_vocab)
    return ParsedData(interactions, catalog, user_ids, item_ids)


def leave_one_out_split(data, seed):
    """Hold out one seeded-random interaction per user plus 99 fresh negatives.

    Each user draws from an independent stream derived from (seed, user), so
    the split does not depend on iteration order. Negatives are sampled
    without replacement from items the user never touched anywhere.
    """
    positives = np.empty(data.num_users, dtype=np.int64)
    negatives = np.empty((data.num_users, NUM_TEST_NEGATIVES), dtype=np.int64)
    all_items = np.arange(data.num_items, dtype=np.int64)
    for u in range(data.num_users):
        mine = data.per_user_items[u]
        if len(mine) < 2:
            raise SplitError(f"user {u} has {len(mine)} interaction(s); need at least 2")
        candidates = data.num_items - len(mine)
        if candidates < NUM_TEST_NEGATIVES:
            raise SplitError(
                f"user {u} has only {candidates} unobserved items; need {NUM_TEST_NEGATIVES}"
            )
        rng = seeded_rng(seed, "split", u)
        positives[u] = mine[rng.integers(len(mine))]
        pool = np.setdiff1d(all_items, mine, assume_unique=True)
        negatives[u] = np.sort(rng.choice(pool, size=NUM_TEST_NEGATIVES, replace=False))

    held = positives[data.users] == data.items
    keep = ~held
    train = InteractionSet.from_arrays(
        data.num_users, data.num_items,
        data.users[keep], data.items[keep], data.timestamps[keep],
    )
    return SplitDataset(train, positives, negatives)


# -- serialization ---------------------------------------------------------


def save_split(split, path):
    """Text manifest: counts then one 'user<TAB>pos<TAB>neg,...' line per user."""
    lines = [
        f"num_users\t{split.train.num_users}",
        f"num_items\t{split.train.num_items}",
    ]
    for u in range(split.train.num_users):
        negs = ",".join(str(n) for n in split.test_negatives[u])
        lines.append(f"{u}\t{split.test_positives[u]}\t{negs}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(path, train):
    rows = {}
    num_users = num_items = None
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if fields[0] == "num_users":
            num_users = int(fields[1])
        elif fields[0] == "num_items":
            num_items = int(fields[1])
        else:
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rows[int(fields[0])] = (int(fields[1]), [int(x) for x in fields[2].split(",")])
    if num_users is None or num_items is None or len(rows) != num_users:
        raise LoadError(f"{path}: incomplete split manifest")
    if train.num_users != num_users or train.num_items != num_items:
        raise LoadError(f"{path}: split counts do not match the train set")
    positives = np.array([rows[u][0] for u in range(num_users)], dtype=np.int64)
    negatives = np.array([rows[u][1] for u in range(num_users)], dtype=np.int64)
    if negatives.shape != (num_users, NUM_TEST_NEGATIVES):
        raise LoadError(f"{path}: expected {NUM_TEST_NEGATIVES} negatives per user")
    return SplitDataset(train, positives, negatives)


def save_interactions(iset, path):
    lines = [f"num_users\t{iset.num_users}", f"num_items\t{iset.num_items}"]
    for u, i, t in zip(iset.users, iset.items, iset.timestamps):
        lines.append(f"{u}\t{i}\t{t}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_interactions(path):
    users, items, stamps = [], [], []
    num_users = num_items = None
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if fields[0] == "num_users":
            num_users = int(fields[1])
        elif fields[0] == "num_items":
            num_items = int(fields[1])
        else:
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            users.append(int(fields[0]))
            items.append(int(fields[1]))
            stamps.append(int(fields[2]))
    if num_users is None or num_items is None:
        raise LoadError(f"{path}: missing count header")
    return InteractionSet.from_arrays(num_users, num_items, users, items, stamps)


def save_catalog(catalog, path):
    lines = [
        f"user_vocab\t{catalog.user_vocab_size}",
        f"item_vocab\t{catalog.item_vocab_size}",
    ]
    for tag, attrs in (("u", catalog.user_attrs), ("i", catalog.item_attrs)):
        for idx, ids in enumerate(attrs):
            lines.append(f"{tag}\t{idx}\t{','.join(str(a) for a in ids)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_catalog(path):
    user_rows, item_rows = {}, {}
    user_vocab = item_vocab = None
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if fields[0] == "user_vocab":
            user_vocab = int(fields[1])
        elif fields[0] == "item_vocab":
            item_vocab = int(fields[1])
        elif fields[0] in ("u", "i"):
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            target = user_rows if fields[0] == "u" else item_rows
            target[int(fields[1])] = [int(x) for x in fields[2].split(",")]
        else:
            raise ParseError(f"{path}:{lineno}: unknown record tag {fields[0]!r}")
    if user_vocab is None or item_vocab is None:
        raise LoadError(f"{path}: missing vocabulary header")
    user_attrs = [user_rows[k] for k in range(len(user_rows))]
    item_attrs = [item_rows[k] for k in range(len(item_rows))]
    return AttributeCatalog(user_attrs, item_attrs, user_vocab, item_vocab)
