import hashlib
import math

SPLIT_RATIO = {"train": 10, "test": 9, "val": 1}


def _key(seed, group_id):
    return hashlib.sha256(f"{seed}:{group_id}".encode()).hexdigest()


def assign_splits(group_ids, seed):
    """Deterministic 10:9:1 train/test/val assignment over unique group ids.

    Groups are ordered by a seeded hash (a keyed shuffle) and cut by the ratio,
    so each id's split depends only on the seed and the id set, never on input
    order.
    """
    uniq = sorted(set(group_ids), key=lambda g: _key(seed, g))
    n = len(uniq)
    total = sum(SPLIT_RATIO.values())
    n_train = math.floor(n * SPLIT_RATIO["train"] / total + 0.5)
    n_val = math.floor(n * SPLIT_RATIO["val"] / total + 0.5)
    n_test = n - n_train - n_val
    out = {}
    for i, g in enumerate(uniq):
        if i < n_train:
            out[g] = "train"
        elif i < n_train + n_test:
            out[g] = "test"
        else:
            out[g] = "val"
    return out
