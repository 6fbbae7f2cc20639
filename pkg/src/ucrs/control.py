"""User control commands and the inference pipeline that serves them.

Four commands steer recommendations at inference time without
retraining: pushing toward another user group's taste, escaping the
user's own group, boosting a target item category, or demoting the
historical majority category. All of them deduct a fraction of the
user-id representation's effect via counterfactual scoring before
ranking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .detect import RecommendationSlate
from .errors import InvalidCommandError, TrainingDivergedError
from .model import _top_k

DEFAULT_ITEM_ALPHA = 0.1
PREDICTOR_MAGIC = b"UCRSPRED"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserFeatureFine:
    """More items liked by another user group (a feature the user lacks)."""

    target_feature: int
    alpha: float = 0.0

    kind = "user_fine"


@dataclass(frozen=True)
class UserFeatureCoarse:
    """Escape the user's own group: mask the named feature's attribute group."""

    own_feature: int
    alpha: float = 0.0

    kind = "user_coarse"


@dataclass(frozen=True)
class ItemFeatureFine:
    """Boost a target item category in the ranking."""

    target_category: int
    beta: float = 0.0
    alpha: float = DEFAULT_ITEM_ALPHA

    kind = "item_fine"


@dataclass(frozen=True)
class ItemFeatureCoarse:
    """Demote the user's historical majority category, optionally boosting
    predicted replacement categories."""

    beta: float = 0.0
    alpha: float = DEFAULT_ITEM_ALPHA
    k_targets: int = 3
    use_prediction: bool = True

    kind = "item_coarse"


ControlCommand = UserFeatureFine | UserFeatureCoarse | ItemFeatureFine | ItemFeatureCoarse


def parse_command(payload: dict, dataset: Dataset) -> ControlCommand:
    """Build a command from its JSON form, resolving names to indices."""
    kind = payload.get("type")
    alpha = float(payload.get("alpha", 0.0))
    beta = float(payload.get("beta", 0.0))
    if kind in ("user_fine", "user_coarse"):
        name = payload.get("target")
        if name not in dataset.feature_names:
            raise InvalidCommandError(f"unknown user feature {name!r}")
        feature = dataset.feature_names.index(name)
        if kind == "user_fine":
            return UserFeatureFine(target_feature=feature, alpha=alpha)
        return UserFeatureCoarse(own_feature=feature, alpha=alpha)
    if kind == "item_fine":
        name = payload.get("target")
        if name not in dataset.category_names:
            raise InvalidCommandError(f"unknown item category {name!r}")
        return ItemFeatureFine(
            target_category=dataset.category_names.index(name),
            beta=beta,
            alpha=float(payload.get("alpha", DEFAULT_ITEM_ALPHA)),
        )
    if kind == "item_coarse":
        return ItemFeatureCoarse(
            beta=beta,
            alpha=float(payload.get("alpha", DEFAULT_ITEM_ALPHA)),
            k_targets=int(payload.get("k_targets", 3)),
            use_prediction=bool(payload.get("use_prediction", True)),
        )
    raise InvalidCommandError(f"unknown command type {kind!r}")


def command_to_json(command: ControlCommand, dataset: Dataset) -> dict:
    payload = {"type": command.kind, "alpha": command.alpha}
    if isinstance(command, UserFeatureFine):
        payload["target"] = dataset.feature_names[command.target_feature]
    elif isinstance(command, UserFeatureCoarse):
        payload["target"] = dataset.feature_names[command.own_feature]
    elif isinstance(command, ItemFeatureFine):
        payload["target"] = dataset.category_names[command.target_category]
        payload["beta"] = command.beta
    elif isinstance(command, ItemFeatureCoarse):
        payload["beta"] = command.beta
        payload["k_targets"] = command.k_targets
        payload["use_prediction"] = command.use_prediction
    return payload


def validate_command(command: ControlCommand, user: int, dataset: Dataset) -> None:
    """Check the command's preconditions for the issuing user."""
    if not 0.0 <= command.alpha <= 1.0:
        raise InvalidCommandError(f"alpha {command.alpha} outside [0, 1]")
    if isinstance(command, UserFeatureFine):
        if dataset.user_features[user, command.target_feature]:
            raise InvalidCommandError(
                f"user already has feature {dataset.feature_names[command.target_feature]!r}"
            )
    elif isinstance(command, UserFeatureCoarse):
        if not dataset.user_features[user, command.own_feature]:
            raise InvalidCommandError(
                f"user does not have feature {dataset.feature_names[command.own_feature]!r}"
            )
    elif isinstance(command, (ItemFeatureFine, ItemFeatureCoarse)):
        if not 0.0 <= command.beta <= 1.0:
            raise InvalidCommandError(f"beta {command.beta} outside [0, 1]")
        if isinstance(command, ItemFeatureCoarse) and not 1 <= command.k_targets <= 5:
            raise InvalidCommandError(f"k_targets {command.k_targets} outside 1..5")
        if len(dataset.positives_by_user("train")[user]) == 0:
            raise InvalidCommandError("item-feature controls need a train history")


# ---------------------------------------------------------------------------
# Counterfactual scoring and the ranking policy
# ---------------------------------------------------------------------------

def counterfactual_score(
    model,
    user: int,
    items,
    alpha: float,
    mask_attr_group: str | None = None,
    override_feature: int | None = None,
) -> np.ndarray:
    """Blend of the edited prediction and its id-masked counterfactual.

    (1 - alpha) * f(edited user, i) + alpha * f(edited user without the
    id representation, i), with f the sigmoid model score. alpha=0 and
    alpha=1 reproduce the endpoints exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    y_edit = model.score_items(
        user, items, mask_attr_group=mask_attr_group, override_feature=override_feature
    )
    y_masked = model.score_items(
        user, items, mask_user_id=True,
        mask_attr_group=mask_attr_group, override_feature=override_feature,
    )
    return (1.0 - alpha) * y_edit + alpha * y_masked


def regularizer_values(
    items,
    item_categories: np.ndarray,
    target_categories=None,
    majority_category: int | None = None,
) -> np.ndarray:
    """Ranking-policy tiers per item: 2 boosts targets, 0 demotes the
    majority category, 1 otherwise.

    With both given (prediction-enhanced coarse control), a target match
    takes precedence over a majority match on multi-label items.
    """
    items = np.asarray(items, dtype=np.int64)
    r = np.ones(len(items), dtype=np.float64)
    if majority_category is not None:
        r[item_categories[items, majority_category] > 0] = 0.0
    if target_categories is not None:
        targets = np.atleast_1d(np.asarray(target_categories, dtype=np.int64))
        if targets.size:
            hit = item_categories[np.ix_(items, targets)].any(axis=1)
            r[hit] = 2.0
    return r


def rank_with_policy(base_scores, r_values, beta: float, k: int) -> tuple[np.ndarray, bool]:
    """Top-k positions by adjusted score Y + beta * r.

    Ties break by higher base score, then lower position. Returns the
    positions and a flag marking a short slate (fewer than k candidates).
    """
    base_scores = np.asarray(base_scores, dtype=np.float64)
    r_values = np.asarray(r_values, dtype=np.float64)
    if base_scores.shape != r_values.shape:
        raise ValueError("scores and regularizer values must align")
    adjusted = base_scores + beta * r_values
    top = _top_k(adjusted, k, tie_scores=base_scores)
    return top, len(top) < k


# ---------------------------------------------------------------------------
# Target category prediction
# ---------------------------------------------------------------------------

class CategoryTransitionPredictor(BaseEstimator):
    """One-hidden-layer network from a category distribution to the next one.

    Trained on the first/second halves of each user's time-sorted
    history, it captures temporal interest transitions and category
    relationships; the softmax output is always a valid distribution.
    """

    def __init__(self, n_categories=None, hidden=16, learning_rate=0.05,
                 n_epochs=200, batch_size=256, seed=0, verbose=False):
        self.n_categories = n_categories
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.verbose = verbose

    def _init_params(self, rng):
        m, h = self.n_categories, self.hidden
        bound1 = np.sqrt(6.0 / (m + h))
        bound2 = np.sqrt(6.0 / (h + m))
        return {
            "w1": rng.uniform(-bound1, bound1, size=(m, h)),
            "b1": np.zeros(h),
            "w2": rng.uniform(-bound2, bound2, size=(h, m)),
            "b2": np.zeros(m),
        }

    @staticmethod
    def _softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def _forward(self, x, params):
        z1 = x @ params["w1"] + params["b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ params["w2"] + params["b2"]
        return self._softmax(z2), {"z1": z1, "a1": a1, "x": x}

    def _loss_and_grads(self, x, y, params=None):
        """Mean cross-entropy against soft target distributions."""
        params = params if params is not None else self.params_
        n = len(x)
        p, cache = self._forward(x, params)
        loss = float(-np.mean(np.sum(y * np.log(p + 1e-12), axis=1)))
        dz2 = (p - y) / n
        grads = {
            "w2": cache["a1"].T @ dz2,
            "b2": dz2.sum(axis=0),
        }
        da1 = dz2 @ params["w2"].T
        dz1 = da1 * (cache["z1"] > 0)
        grads["w1"] = cache["x"].T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        return loss, grads

    def fit(self, X, Y):
        """X: input distributions (n, M); Y: target distributions (n, M)."""
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.shape != Y.shape or X.ndim != 2:
            raise ValueError("X and Y must both be (n, M) distributions")
        if self.n_categories is None:
            self.n_categories = X.shape[1]
        elif X.shape[1] != self.n_categories:
            raise ValueError(f"expected {self.n_categories} categories, got {X.shape[1]}")
        rng = np.random.default_rng(self.seed)
        self.params_ = self._init_params(rng)
        accum = {k: np.zeros_like(v) for k, v in self.params_.items()}
        n = len(X)
        self.history_ = []
        for epoch in range(self.n_epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                rows = perm[start : start + self.batch_size]
                loss, grads = self._loss_and_grads(X[rows], Y[rows])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite predictor loss at epoch {epoch}")
                for name, grad in grads.items():
                    acc = accum[name]
                    acc += grad * grad
                    self.params_[name] -= self.learning_rate * grad / np.sqrt(acc + 1e-8)
                total += loss * len(rows)
            self.history_.append({"epoch": epoch, "loss": total / n})
            if self.verbose:
                print(f"predictor epoch {epoch}: loss={total / n:.5f}")
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("predictor is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self._forward(X, self.params_)[0]

    def save(self, path) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("predictor is not fitted")
        names = sorted(self.params_)
        header = {
            "format_version": 1,
            "n_categories": self.n_categories,
            "hidden": self.hidden,
            "arrays": [{"name": n, "shape": list(self.params_[n].shape)} for n in names],
        }
        blob = json.dumps(header).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(PREDICTOR_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(self.params_[n].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "CategoryTransitionPredictor":
        with Path(path).open("rb") as fh:
            if fh.read(len(PREDICTOR_MAGIC)) != PREDICTOR_MAGIC:
                raise ValueError(f"{path} is not a predictor checkpoint")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            predictor = cls(n_categories=header["n_categories"], hidden=header["hidden"])
            params = {}
            for spec in header["arrays"]:
                shape = tuple(spec["shape"])
                buf = fh.read(int(np.prod(shape)) * 4)
                params[spec["name"]] = (
                    np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
                )
            predictor.params_ = params
        return predictor


def history_halves(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """First/second-half category distributions of each eligible user's
    time-sorted train history (odd lengths give the extra item to the
    first half). Users with fewer than two train interactions are skipped."""
    firsts, seconds = [], []
    train_pos = dataset.positives_by_user("train")
    for u in range(dataset.n_users):
        items = train_pos[u]
        if len(items) < 2:
            continue
        mid = (len(items) + 1) // 2
        firsts.append(dataset.category_distribution(items[:mid]))
        seconds.append(dataset.category_distribution(items[mid:]))
    if not firsts:
        raise ValueError("no users with at least two train interactions")
    return np.asarray(firsts), np.asarray(seconds)


def train_category_predictor(
    dataset: Dataset, hidden=16, learning_rate=0.05, n_epochs=200, seed=0,
) -> CategoryTransitionPredictor:
    first, second = history_halves(dataset)
    predictor = CategoryTransitionPredictor(
        n_categories=dataset.n_categories, hidden=hidden,
        learning_rate=learning_rate, n_epochs=n_epochs, seed=seed,
    )
    return predictor.fit(first, second)


def predict_target_categories(
    predictor: CategoryTransitionPredictor,
    train_distribution: np.ndarray,
    majority: int,
    k: int,
) -> np.ndarray:
    """Top-k predicted categories after intervening on the majority one.

    The user's full train-history distribution feeds the predictor
    unchanged (at serving time the whole history is the "first part");
    the intervention zeroes the majority category on the output side, so
    it can never be returned. Zeroing it out of the *input* instead
    would delete the signal that identifies the user's interest profile
    and push the predictor off its training manifold. May return fewer
    than k when the catalog has too few other categories.
    """
    if not 1 <= k <= 5:
        raise ValueError(f"k must be in 1..5, got {k}")
    x = np.asarray(train_distribution, dtype=np.float64)
    probs = predictor.predict_proba(x)[0].copy()
    probs[majority] = -np.inf
    order = np.lexsort((np.arange(len(probs)), -probs))
    order = order[order != majority]
    return order[: min(k, len(x) - 1)]


# ---------------------------------------------------------------------------
# Command application
# ---------------------------------------------------------------------------

def apply_control(
    model,
    dataset: Dataset,
    user: int,
    command: ControlCommand,
    k: int = 10,
    predictor: CategoryTransitionPredictor | None = None,
    candidates: np.ndarray | None = None,
) -> RecommendationSlate:
    """Run the full inference pipeline for one command.

    User-feature commands edit the user's features and blend in the
    id-masked counterfactual; item-feature commands additionally rank
    with the controllable policy. Candidates default to the catalog
    minus the user's train/valid positives.
    """
    validate_command(command, user, dataset)
    if candidates is None:
        candidates = dataset.candidate_items(user)
    candidates = np.asarray(candidates, dtype=np.int64)
    provenance: dict = {"command": command.kind, "alpha": command.alpha}

    mask_group = None
    override = None
    if isinstance(command, UserFeatureFine):
        override = command.target_feature
    elif isinstance(command, UserFeatureCoarse):
        mask_group = model.layout.group_of_feature(command.own_feature)

    scores = counterfactual_score(
        model, user, candidates, command.alpha,
        mask_attr_group=mask_group, override_feature=override,
    )

    if isinstance(command, (UserFeatureFine, UserFeatureCoarse)):
        top = _top_k(scores, k)
        return RecommendationSlate(
            user=user, items=candidates[top], scores=scores[top],
            provenance=provenance, truncated=len(top) < k,
        )

    majority = dataset.majority_category(user, "train")
    targets = None
    demote = None
    if isinstance(command, ItemFeatureFine):
        targets = np.asarray([command.target_category])
        provenance["targets"] = targets.tolist()
    else:
        demote = majority
        provenance["majority_category"] = majority
        if command.use_prediction:
            if predictor is None:
                raise ValueError("item_coarse with use_prediction needs a predictor")
            train_items = dataset.positives_by_user("train")[user]
            targets = predict_target_categories(
                predictor, dataset.category_distribution(train_items),
                majority, command.k_targets,
            )
            provenance["targets"] = targets.tolist()
    provenance["beta"] = command.beta

    r = regularizer_values(
        candidates, dataset.item_categories,
        target_categories=targets, majority_category=demote,
    )
    top, truncated = rank_with_policy(scores, r, command.beta, k)
    return RecommendationSlate(
        user=user, items=candidates[top], scores=scores[top],
        provenance=provenance, truncated=truncated,
    )


def baseline_slate(model, dataset: Dataset, user: int, k: int = 10,
                   candidates: np.ndarray | None = None) -> RecommendationSlate:
    """Uncontrolled top-k for a user (provenance tagged "baseline")."""
    if candidates is None:
        candidates = dataset.candidate_items(user)
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = model.score_items(user, candidates)
    top = _top_k(scores, k)
    return RecommendationSlate(
        user=user, items=candidates[top], scores=scores[top],
        provenance={"command": "baseline"}, truncated=len(top) < k,
    )
