"""Factorization models over sparse binary user/item feature vectors.

Features are laid out as four contiguous roles: user id, user
attributes, item id, item categories. Any role can be dropped at
inference (e.g. masking the user-id bit) or at construction (models
trained without user attributes or item categories).
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .errors import TrainingDivergedError

CHECKPOINT_MAGIC = b"UCRSMODL"
ADAGRAD_EPS = 1e-8


@dataclass
class FeatureLayout:
    """Role offsets plus per-user/per-item active feature rows.

    Global feature index space: [user ids][user attributes][item ids]
    [item categories], with any role optionally excluded.
    """

    n_users: int
    n_items: int
    user_attr_rows: list[np.ndarray]    # per user, local attr indices
    item_cat_rows: list[np.ndarray]     # per item, local category indices
    attribute_groups: dict[str, tuple[int, int]]
    n_attrs: int
    n_cats: int
    use_user_id: bool = True
    use_user_attrs: bool = True
    use_item_id: bool = True
    use_item_cats: bool = True
    offsets: dict[str, int] = field(init=False)
    n_features: int = field(init=False)

    def __post_init__(self):
        pos = 0
        self.offsets = {}
        for role, width, used in (
            ("user_id", self.n_users, self.use_user_id),
            ("user_attr", self.n_attrs, self.use_user_attrs),
            ("item_id", self.n_items, self.use_item_id),
            ("item_cat", self.n_cats, self.use_item_cats),
        ):
            if used:
                self.offsets[role] = pos
                pos += width
        self.n_features = pos

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        use_user_id: bool = True,
        use_user_attrs: bool = True,
        use_item_id: bool = True,
        use_item_cats: bool = True,
    ) -> "FeatureLayout":
        attr_rows = [np.flatnonzero(row) for row in dataset.user_features]
        cat_rows = [np.flatnonzero(row) for row in dataset.item_categories]
        return cls(
            n_users=dataset.n_users,
            n_items=dataset.n_items,
            user_attr_rows=attr_rows,
            item_cat_rows=cat_rows,
            attribute_groups=dict(dataset.attribute_groups),
            n_attrs=dataset.n_user_features,
            n_cats=dataset.n_categories,
            use_user_id=use_user_id,
            use_user_attrs=use_user_attrs and dataset.n_user_features > 0,
            use_item_id=use_item_id,
            use_item_cats=use_item_cats and dataset.n_categories > 0,
        )

    def group_of_feature(self, feature: int) -> str:
        for name, (start, stop) in self.attribute_groups.items():
            if start <= feature < stop:
                return name
        raise ValueError(f"user feature index {feature} not in any attribute group")

    def user_feature_indices(
        self,
        user: int,
        mask_user_id: bool = False,
        mask_attr_group: str | None = None,
        override_feature: int | None = None,
    ) -> np.ndarray:
        """Global indices of the user-side active features after edits.

        `override_feature` replaces the active bit of its own attribute
        group; `mask_attr_group` drops that group entirely. Edits never
        touch the other groups.
        """
        parts = []
        if self.use_user_id and not mask_user_id:
            parts.append(np.asarray([self.offsets["user_id"] + user], dtype=np.int64))
        if self.use_user_attrs:
            attrs = self.user_attr_rows[user]
            if override_feature is not None:
                start, stop = self.attribute_groups[self.group_of_feature(override_feature)]
                attrs = attrs[(attrs < start) | (attrs >= stop)]
                attrs = np.sort(np.append(attrs, override_feature))
            if mask_attr_group is not None:
                if mask_attr_group not in self.attribute_groups:
                    raise KeyError(f"unknown attribute group {mask_attr_group!r}")
                start, stop = self.attribute_groups[mask_attr_group]
                attrs = attrs[(attrs < start) | (attrs >= stop)]
            if len(attrs):
                parts.append(self.offsets["user_attr"] + attrs.astype(np.int64))
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def item_feature_indices(self, item: int) -> np.ndarray:
        parts = []
        if self.use_item_id:
            parts.append(np.asarray([self.offsets["item_id"] + item], dtype=np.int64))
        if self.use_item_cats:
            cats = self.item_cat_rows[item]
            if len(cats):
                parts.append(self.offsets["item_cat"] + cats.astype(np.int64))
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def describe(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_attrs": self.n_attrs,
            "n_cats": self.n_cats,
            "use_user_id": self.use_user_id,
            "use_user_attrs": self.use_user_attrs,
            "use_item_id": self.use_item_id,
            "use_item_cats": self.use_item_cats,
            "offsets": dict(self.offsets),
            "n_features": self.n_features,
        }


def assemble_features(
    layout: FeatureLayout,
    user: int,
    item: int,
    mask_user_id: bool = False,
    mask_attr_group: str | None = None,
    override_feature: int | None = None,
) -> np.ndarray:
    """Sorted global indices of the active bits for one (user, item) pair."""
    idx = np.concatenate([
        layout.user_feature_indices(user, mask_user_id, mask_attr_group, override_feature),
        layout.item_feature_indices(item),
    ])
    return np.sort(idx)


def _padded_rows(rows: list[np.ndarray], offset: int) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(r) for r in rows), default=0)
    padded = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        padded[i, : len(r)] = offset + r
        mask[i, : len(r)] = True
    return padded, mask


def interactions_to_csr(layout: FeatureLayout, pairs: np.ndarray) -> sparse.csr_matrix:
    """Binary design matrix (one row per interaction) for training."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    user_rows = [
        layout.user_feature_indices(u) for u in range(layout.n_users)
    ]
    item_rows = [layout.item_feature_indices(i) for i in range(layout.n_items)]
    upad, umask = _padded_rows(user_rows, 0)
    ipad, imask = _padded_rows(item_rows, 0)
    stacked = np.hstack([upad[pairs[:, 0]], ipad[pairs[:, 1]]])
    mask = np.hstack([umask[pairs[:, 0]], imask[pairs[:, 1]]])
    indices = stacked[mask]
    counts = mask.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    matrix = sparse.csr_matrix(
        (np.ones(len(indices), dtype=np.float64), indices, indptr),
        shape=(len(pairs), layout.n_features),
    )
    matrix.sort_indices()
    return matrix


@dataclass
class RankingValidation:
    """Per-user held-out positives and exclusions for Recall@k model selection."""

    users: np.ndarray                   # users with >= 1 held-out positive
    positives: list[np.ndarray]         # aligned with `users`
    exclude: list[np.ndarray]           # items to mask from candidates, aligned
    k: int = 10

    @classmethod
    def from_dataset(cls, dataset: Dataset, split: str = "valid", k: int = 10) -> "RankingValidation":
        held = dataset.positives_by_user(split)
        train = dataset.positives_by_user("train")
        users = [u for u in range(dataset.n_users) if len(held[u])]
        return cls(
            users=np.asarray(users, dtype=np.int64),
            positives=[np.unique(held[u]) for u in users],
            exclude=[np.unique(train[u]) for u in users],
            k=k,
        )


def _top_k(scores: np.ndarray, k: int, tie_scores: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k largest scores; ties by tie_scores desc, then index asc.

    A partition prefilter keeps only candidates that can reach the top k
    (everything >= the kth largest value), so the exact tie-break sort
    runs on a handful of items rather than the catalog.
    """
    n = len(scores)
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        thresh = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= thresh)
    else:
        cand = np.arange(n)
    if tie_scores is None:
        order = np.lexsort((cand, -scores[cand]))
    else:
        order = np.lexsort((cand, -tie_scores[cand], -scores[cand]))
    return cand[order[:k]]


class _FactorizationBase(BaseEstimator):
    """Shared training/scoring machinery for FM and NFM."""

    def __init__(
        self,
        layout=None,
        n_factors=64,
        learning_rate=0.05,
        l2=0.0,
        n_epochs=100,
        batch_size=1024,
        patience=10,
        init_scale=0.01,
        seed=0,
        verbose=False,
    ):
        self.layout = layout
        self.n_factors = n_factors
        self.learning_rate = learning_rate
        self.l2 = l2
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.init_scale = init_scale
        self.seed = seed
        self.verbose = verbose

    model_kind = "fm"

    # -- parameter handling ------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        f = self.layout.n_features
        return {
            "bias": np.zeros(1, dtype=np.float64),
            "linear": np.zeros(f, dtype=np.float64),
            "emb": rng.normal(0.0, self.init_scale, size=(f, self.n_factors)),
        }

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    # -- forward / backward -------------------------------------------------

    def _interaction_stats(self, x: sparse.csr_matrix, params):
        v = params["emb"]
        s = x @ v                       # (B, d) sums of active embeddings
        q = x @ (v * v)                 # (B, d) sums of squared embeddings
        bi = 0.5 * (s * s - q)          # bi-interaction vector
        lin = params["bias"][0] + x @ params["linear"]
        return s, bi, lin

    def _head_forward(self, bi: np.ndarray, params) -> tuple[np.ndarray, dict]:
        """Map bi-interaction vectors to the scalar pairwise contribution."""
        raise NotImplementedError

    def _head_backward(self, g: np.ndarray, cache: dict, params, grads) -> np.ndarray:
        """Gradient of the loss w.r.t. bi, given dL/d(head output) = g."""
        raise NotImplementedError

    def _raw_from_csr(self, x: sparse.csr_matrix, params=None) -> np.ndarray:
        params = params if params is not None else self.params_
        _, bi, lin = self._interaction_stats(x, params)
        head, _ = self._head_forward(bi, params)
        return lin + head

    def _loss_and_grads(self, x: sparse.csr_matrix, y: np.ndarray, params=None):
        """Mean binary cross-entropy (+ L2 on active embeddings) and its gradients."""
        params = params if params is not None else self.params_
        b = x.shape[0]
        s, bi, lin = self._interaction_stats(x, params)
        head, cache = self._head_forward(bi, params)
        raw = lin + head
        p = expit(raw)
        eps = 1e-12
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        g = (p - y) / b
        grads = {
            "bias": np.asarray([g.sum()]),
            "linear": x.T @ g,
        }
        g_bi = self._head_backward(g, cache, params, grads)   # (B, d)
        xt = x.T.tocsr()
        grads["emb"] = xt @ (g_bi * s) - params["emb"] * (xt @ g_bi)
        if self.l2:
            counts = np.asarray(x.sum(axis=0)).ravel()
            loss += self.l2 / b * float(np.sum(counts[:, None] * params["emb"] ** 2))
            grads["emb"] = grads["emb"] + (2.0 * self.l2 / b) * counts[:, None] * params["emb"]
        return loss, grads

    # -- training ------------------------------------------------------------

    def fit(self, X, y, valid: RankingValidation | None = None):
        """Train on (user, item) index pairs with binary labels.

        With `valid` given, tracks Recall@k each epoch, keeps the best
        checkpoint, and stops after `patience` epochs without
        improvement. Deterministic given the seed.
        """
        if self.layout is None:
            raise ValueError("layout is required")
        X = np.asarray(X)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"X must be (n, 2) [user, item] pairs, got {X.shape}")
        if len(X) != len(y):
            raise ValueError("X and y length mismatch")
        rng = np.random.default_rng(self.seed)
        self.params_ = self._init_params(rng)
        self._accum = {k: np.zeros_like(p) for k, p in self.params_.items()}
        design = interactions_to_csr(self.layout, X)
        n = design.shape[0]
        self.history_ = []
        best_recall, best_params, stale = -1.0, None, 0
        for epoch in range(self.n_epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                rows = perm[start : start + self.batch_size]
                loss, grads = self._loss_and_grads(design[rows], y[rows])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch offset {start}"
                    )
                for name, grad in grads.items():
                    acc = self._accum[name]
                    acc += grad * grad
                    self.params_[name] -= self.learning_rate * grad / np.sqrt(acc + ADAGRAD_EPS)
                total += loss * len(rows)
            record = {"epoch": epoch, "loss": total / n}
            if valid is not None:
                recall = self.ranking_recall(valid)
                record["valid_recall"] = recall
                if recall > best_recall:
                    best_recall, stale = recall, 0
                    best_params = copy.deepcopy(self.params_)
                else:
                    stale += 1
            self.history_.append(record)
            if self.verbose:
                print(f"epoch {epoch}: " + " ".join(f"{k}={v:.5f}" for k, v in record.items() if k != "epoch"))
            self._item_cache = None
            if valid is not None and stale >= self.patience:
                break
        if best_params is not None:
            self.params_ = best_params
        self._item_cache = None
        return self

    def ranking_recall(self, valid: RankingValidation) -> float:
        """Macro-averaged Recall@k over the held-out users."""
        scores = self.score_matrix(valid.users)
        recalls = []
        for row, (positives, exclude) in enumerate(zip(valid.positives, valid.exclude)):
            user_scores = scores[row].copy()
            user_scores[exclude] = -np.inf
            top = _top_k(user_scores, valid.k)
            hits = np.intersect1d(top, positives).size
            recalls.append(hits / len(positives))
        return float(np.mean(recalls)) if recalls else 0.0

    # -- scoring ---------------------------------------------------------------

    def _item_side(self):
        """Per-item aggregates (linear sum, embedding sum, squared sum), cached."""
        self._check_fitted()
        cache = getattr(self, "_item_cache", None)
        if cache is None:
            v, w = self.params_["emb"], self.params_["linear"]
            d = v.shape[1]
            n_items = self.layout.n_items
            s = np.zeros((n_items, d))
            q = np.zeros((n_items, d))
            lin = np.zeros(n_items)
            for item in range(n_items):
                idx = self.layout.item_feature_indices(item)
                if len(idx):
                    s[item] = v[idx].sum(axis=0)
                    q[item] = (v[idx] ** 2).sum(axis=0)
                    lin[item] = w[idx].sum()
            cache = self._item_cache = (s, q, lin)
        return cache

    def _user_side(self, users, mask_user_id=False, mask_attr_group=None, override_features=None):
        v, w = self.params_["emb"], self.params_["linear"]
        d = v.shape[1]
        s = np.zeros((len(users), d))
        q = np.zeros((len(users), d))
        lin = np.zeros(len(users))
        for row, user in enumerate(users):
            override = None if override_features is None else override_features[row]
            idx = self.layout.user_feature_indices(
                int(user), mask_user_id, mask_attr_group, override
            )
            if len(idx):
                s[row] = v[idx].sum(axis=0)
                q[row] = (v[idx] ** 2).sum(axis=0)
                lin[row] = w[idx].sum()
        return s, q, lin

    def _pair_scores(self, su, qu, lu, si, qi, li) -> np.ndarray:
        """Raw scores for the cross product of user rows and item rows."""
        cross = su @ si.T
        user_const = 0.5 * (su * su - qu).sum(axis=1) + lu + self.params_["bias"][0]
        item_const = 0.5 * (si * si - qi).sum(axis=1) + li
        return cross + user_const[:, None] + item_const[None, :]

    def score_matrix(
        self,
        users,
        mask_user_id=False,
        mask_attr_group=None,
        override_features=None,
        raw=False,
        chunk=1024,
    ) -> np.ndarray:
        """Scores for every (user, item) pair, users down the rows.

        `override_features` is an optional per-user replacement feature
        (aligned with `users`). Output is sigmoid unless raw=True.
        """
        self._check_fitted()
        users = np.asarray(users, dtype=np.int64)
        si, qi, li = self._item_side()
        out = np.empty((len(users), self.layout.n_items))
        for start in range(0, len(users), chunk):
            stop = min(start + chunk, len(users))
            ov = None if override_features is None else override_features[start:stop]
            su, qu, lu = self._user_side(users[start:stop], mask_user_id, mask_attr_group, ov)
            out[start:stop] = self._pair_scores(su, qu, lu, si, qi, li)
        return out if raw else expit(out)

    def score_items(
        self,
        user: int,
        items=None,
        mask_user_id=False,
        mask_attr_group=None,
        override_feature=None,
        raw=False,
    ) -> np.ndarray:
        """Scores for one user over `items` (all items when None), order preserved."""
        self._check_fitted()
        overrides = None if override_feature is None else [override_feature]
        full = self.score_matrix(
            np.asarray([user]), mask_user_id, mask_attr_group, overrides, raw=raw
        )[0]
        return full if items is None else full[np.asarray(items, dtype=np.int64)]

    def raw_scores(self, X) -> np.ndarray:
        """Raw (pre-sigmoid) scores for (user, item) index pairs."""
        self._check_fitted()
        design = interactions_to_csr(self.layout, np.asarray(X))
        return self._raw_from_csr(design)

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.raw_scores(X))

    def predict(self, X) -> np.ndarray:
        """Binary interaction labels at the 0.5 probability threshold."""
        return (self.raw_scores(X) > 0).astype(np.int64)

    # -- persistence --------------------------------------------------------------

    def _extra_header(self) -> dict:
        return {}

    def save(self, path) -> None:
        """Versioned checkpoint: JSON header + little-endian float32 arrays."""
        self._check_fitted()
        path = Path(path)
        names = sorted(self.params_)
        header = {
            "format_version": 1,
            "model": self.model_kind,
            "n_factors": self.n_factors,
            "score_convention": "sigmoid",
            "layout": self.layout.describe(),
            "arrays": [{"name": n, "shape": list(self.params_[n].shape)} for n in names],
            **self._extra_header(),
        }
        blob = json.dumps(header).encode("utf-8")
        with path.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(self.params_[n].astype("<f4").tobytes())

    @staticmethod
    def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
        path = Path(path)
        with path.open("rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a model checkpoint")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            params = {}
            for spec in header["arrays"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 4)
                params[spec["name"]] = (
                    np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
                )
        return header, params


class FMRecommender(_FactorizationBase):
    """Second-order factorization machine with a sigmoid output."""

    model_kind = "fm"

    def _head_forward(self, bi, params):
        return bi.sum(axis=1), {}

    def _head_backward(self, g, cache, params, grads):
        return np.repeat(g[:, None], params["emb"].shape[1], axis=1)


class NFMRecommender(_FactorizationBase):
    """Neural factorization machine: bi-interaction vector through one
    ReLU hidden layer and a scalar output weight, plus the linear part."""

    model_kind = "nfm"

    def __init__(
        self,
        layout=None,
        n_factors=64,
        hidden=16,
        learning_rate=0.05,
        l2=0.0,
        n_epochs=100,
        batch_size=1024,
        patience=10,
        init_scale=0.01,
        seed=0,
        verbose=False,
    ):
        super().__init__(
            layout=layout, n_factors=n_factors, learning_rate=learning_rate, l2=l2,
            n_epochs=n_epochs, batch_size=batch_size, patience=patience,
            init_scale=init_scale, seed=seed, verbose=verbose,
        )
        self.hidden = hidden

    def _init_params(self, rng):
        params = super()._init_params(rng)
        bound = np.sqrt(6.0 / (self.n_factors + self.hidden))
        params["w1"] = rng.uniform(-bound, bound, size=(self.n_factors, self.hidden))
        params["b1"] = np.zeros(self.hidden, dtype=np.float64)
        params["w2"] = rng.uniform(-np.sqrt(6.0 / (self.hidden + 1)),
                                   np.sqrt(6.0 / (self.hidden + 1)), size=self.hidden)
        return params

    def _head_forward(self, bi, params):
        z = bi @ params["w1"] + params["b1"]
        a = np.maximum(z, 0.0)
        return a @ params["w2"], {"z": z, "a": a, "bi": bi}

    def _head_backward(self, g, cache, params, grads):
        dz = (g[:, None] * params["w2"][None, :]) * (cache["z"] > 0)
        grads["w1"] = cache["bi"].T @ dz
        grads["b1"] = dz.sum(axis=0)
        grads["w2"] = cache["a"].T @ g
        return dz @ params["w1"].T

    def _extra_header(self):
        return {"hidden": self.hidden}

    def _pair_scores(self, su, qu, lu, si, qi, li):
        # z decomposes into user-only, item-only, and cross terms; the cross
        # term is one matmul per hidden unit, keeping all-ranking cheap.
        p = self.params_
        w1, b1, w2 = p["w1"], p["b1"], p["w2"]
        user_part = 0.5 * ((su * su - qu) @ w1)          # (U, H)
        item_part = 0.5 * ((si * si - qi) @ w1)          # (I, H)
        out = (lu + p["bias"][0])[:, None] + li[None, :]
        for h in range(w1.shape[1]):
            z_h = (su * w1[:, h]) @ si.T
            z_h += user_part[:, h][:, None] + item_part[:, h][None, :] + b1[h]
            out += w2[h] * np.maximum(z_h, 0.0)
        return out


def load_model(path, dataset: Dataset):
    """Load a checkpoint, rebuilding the feature layout from the dataset."""
    header, params = _FactorizationBase._read_checkpoint(path)
    ldesc = header["layout"]
    for key, attr in (("n_users", "n_users"), ("n_items", "n_items"),
                      ("n_attrs", "n_user_features"), ("n_cats", "n_categories")):
        if ldesc[key] != getattr(dataset, attr):
            raise ValueError(
                f"checkpoint/dataset mismatch: {key}={ldesc[key]} vs {getattr(dataset, attr)}"
            )
    layout = FeatureLayout.from_dataset(
        dataset,
        use_user_id=ldesc["use_user_id"],
        use_user_attrs=ldesc["use_user_attrs"],
        use_item_id=ldesc["use_item_id"],
        use_item_cats=ldesc["use_item_cats"],
    )
    if header["model"] == "fm":
        model = FMRecommender(layout=layout, n_factors=header["n_factors"])
    elif header["model"] == "nfm":
        model = NFMRecommender(
            layout=layout, n_factors=header["n_factors"], hidden=header["hidden"]
        )
    else:
        raise ValueError(f"unknown model kind {header['model']!r}")
    model.params_ = params
    model._item_cache = None
    return model
