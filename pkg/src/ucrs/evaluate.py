"""End-to-end experiment orchestration: cohorts, baselines, grids, tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import control, detect
from .data import Dataset, sample_negatives, select_preference_shift_users
from .detect import macro_mean
from .errors import CohortMismatchError, UnsupportedScenarioError
from .model import (FeatureLayout, FMRecommender, NFMRecommender,
                    RankingValidation, _top_k, load_model)

SCENARIOS = ("user_fine", "user_coarse", "item_fine", "item_coarse")
DEFAULT_ALPHA_GRID = [round(0.1 * i, 3) for i in range(6)]     # 0 .. 0.5
DEFAULT_BETA_GRID = [round(0.01 * i, 3) for i in range(11)]    # 0 .. 0.1
DEFAULT_K_GRID = [1, 2, 3, 4, 5]
DIVERSITY_POOL = 100
DIVERSITY_BLEND = 0.5

SCENARIO_VARIANTS = {
    "item_fine": ["random", "base", "wo_if", "diversity", "reranking", "c_uci", "f_uci"],
    "item_coarse": ["random", "base", "wo_if", "diversity", "reranking", "c_uci", "f_uci"],
    "user_fine": ["random", "base", "wo_uf", "change_uf", "diversity", "uci"],
    "user_coarse": ["random", "base", "wo_uf", "mask_uf", "diversity", "uci"],
}

SCENARIO_COLUMNS = {
    "item_fine": ["recall", "ndcg", "w_ndcg", "mcd", "tcd", "coverage"],
    "item_coarse": ["recall", "ndcg", "w_ndcg", "mcd", "tcd", "coverage"],
    "user_fine": ["recall", "ndcg", "iso_index", "dis_euc", "coverage"],
    "user_coarse": ["recall", "ndcg", "iso_index", "coverage"],
}

LOWER_IS_BETTER = {"iso_index", "dis_euc", "mcd"}


@dataclass
class ExperimentConfig:
    data_dir: str
    scenario: str
    model: str = "fm"
    variants: list[str] | None = None
    alpha_grid: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    beta_grid: list[float] = field(default_factory=lambda: list(DEFAULT_BETA_GRID))
    k_targets_grid: list[int] = field(default_factory=lambda: list(DEFAULT_K_GRID))
    k: int = 10
    seed: int = 0
    n_factors: int = 64
    learning_rate: float = 0.05
    l2: float = 0.0
    hidden: int = 16
    n_epochs: int = 100
    batch_size: int = 1024
    patience: int = 10
    predictor_hidden: int = 16
    predictor_epochs: int = 200
    model_path: str | None = None
    user_fine_attribute: str = "gender"
    user_coarse_attribute: str = "age"
    verbose: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.variants is None:
            self.variants = list(SCENARIO_VARIANTS[self.scenario])
        bad = [v for v in self.variants if v not in SCENARIO_VARIANTS[self.scenario]]
        if bad:
            raise ValueError(f"variants {bad} not applicable to scenario {self.scenario!r}")

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        payload = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls(**payload)


@dataclass
class Cohort:
    """Scenario user set with per-user command parameters."""

    scenario: str
    users: np.ndarray
    h_bar: np.ndarray | None = None         # train-majority category, item scenarios
    h_hat: np.ndarray | None = None         # test-majority category, item scenarios
    x_hat: np.ndarray | None = None         # target user feature, user_fine
    x_bar: np.ndarray | None = None         # own user feature, user scenarios
    labels: np.ndarray | None = None        # group label per user (iso / dis-euc)
    attribute: str | None = None


def select_cohort(
    scenario: str,
    dataset: Dataset,
    user_fine_attribute: str = "gender",
    user_coarse_attribute: str = "age",
) -> Cohort:
    """Deterministic evaluation cohort plus per-user command parameters.

    Item scenarios use preference-shift users with the train majority to
    demote and the test majority as target. User scenarios target the
    opposite group of a two-valued attribute (fine) or escape the user's
    own group (coarse).
    """
    if scenario in ("item_fine", "item_coarse"):
        users = select_preference_shift_users(dataset)
        train_pos = dataset.positives_by_user("train")
        test_pos = dataset.positives_by_user("test")
        h_bar = np.asarray(
            [detect.majority_category(train_pos[u], dataset.item_categories) for u in users]
        )
        h_hat = np.asarray(
            [detect.majority_category(test_pos[u], dataset.item_categories) for u in users]
        )
        labels = np.asarray([dataset.category_names[c] for c in h_bar])
        return Cohort(scenario, users, h_bar=h_bar, h_hat=h_hat, labels=labels)

    attribute = user_fine_attribute if scenario == "user_fine" else user_coarse_attribute
    if attribute not in dataset.attribute_groups:
        raise UnsupportedScenarioError(
            f"scenario {scenario!r} needs user attribute {attribute!r}, "
            f"dataset has {sorted(dataset.attribute_groups)}"
        )
    start, stop = dataset.attribute_groups[attribute]
    if scenario == "user_fine" and stop - start != 2:
        raise UnsupportedScenarioError(
            f"fine-grained user control needs a two-valued attribute, "
            f"{attribute!r} has {stop - start} values"
        )
    users = np.arange(dataset.n_users, dtype=np.int64)
    own = np.asarray([start + int(np.argmax(dataset.user_features[u, start:stop])) for u in users])
    labels = np.asarray([dataset.feature_names[f] for f in own])
    x_hat = None
    if scenario == "user_fine":
        x_hat = np.asarray([start + (1 - (f - start)) for f in own])
    return Cohort(scenario, users, x_bar=own, x_hat=x_hat, labels=labels, attribute=attribute)


# ---------------------------------------------------------------------------
# Scenario runner: shared precomputed score matrices + slate builders
# ---------------------------------------------------------------------------

class ScenarioRunner:
    """Precomputes cohort score matrices so knob grids are cheap re-ranks.

    The counterfactual blend is affine in alpha, so two endpoint
    matrices (edited, and edited with the user-id masked) cover the
    whole alpha grid.
    """

    def __init__(self, dataset: Dataset, model, cohort: Cohort, k: int = 10,
                 predictor=None, seed: int = 0):
        self.dataset = dataset
        self.model = model
        self.cohort = cohort
        self.k = k
        self.predictor = predictor
        self.seed = seed
        users = cohort.users
        train_pos = dataset.positives_by_user("train")
        valid_pos = dataset.positives_by_user("valid")
        test_pos = dataset.positives_by_user("test")
        self.exclude_test = [
            np.union1d(train_pos[u], valid_pos[u]) for u in users
        ]
        self.exclude_valid = [np.unique(train_pos[u]) for u in users]
        self.valid_pos = [np.unique(valid_pos[u]) for u in users]
        self.test_pos = [np.unique(test_pos[u]) for u in users]
        self.train_pos = [train_pos[u] for u in users]

        # scores stay float64: variant fast paths must equal apply_control exactly
        self.base = model.score_matrix(users)
        if cohort.scenario == "user_fine":
            ov = list(cohort.x_hat)
            self.edit = model.score_matrix(users, override_features=ov)
            self.edit_noid = model.score_matrix(
                users, mask_user_id=True, override_features=ov
            )
        elif cohort.scenario == "user_coarse":
            self.edit = model.score_matrix(users, mask_attr_group=cohort.attribute)
            self.edit_noid = model.score_matrix(
                users, mask_user_id=True, mask_attr_group=cohort.attribute
            )
        else:
            self.edit = self.base
            self.edit_noid = model.score_matrix(users, mask_user_id=True)
        self._predicted_targets: dict[tuple[int, int], np.ndarray] = {}

    # -- helpers ------------------------------------------------------------

    def _excludes(self, mode: str):
        return self.exclude_test if mode == "test" else self.exclude_valid

    def predicted_targets(self, row: int, k_targets: int) -> np.ndarray:
        key = (row, k_targets)
        if key not in self._predicted_targets:
            u = int(self.cohort.users[row])
            dist = self.dataset.category_distribution(self.train_pos[row])
            self._predicted_targets[key] = control.predict_target_categories(
                self.predictor, dist, int(self.cohort.h_bar[row]), k_targets
            )
        return self._predicted_targets[key]

    def _r_row(self, variant: str, row: int, k_targets: int) -> np.ndarray | None:
        cats = self.dataset.item_categories
        all_items = np.arange(self.dataset.n_items)
        if variant == "reranking":
            return control.regularizer_values(
                all_items, cats, majority_category=int(self.cohort.h_bar[row])
            )
        if variant == "f_uci":
            return control.regularizer_values(
                all_items, cats, target_categories=[int(self.cohort.h_hat[row])]
            )
        if variant == "c_uci":
            return control.regularizer_values(
                all_items, cats,
                target_categories=self.predicted_targets(row, k_targets),
                majority_category=int(self.cohort.h_bar[row]),
            )
        return None

    def _blend(self, variant: str, row: int, alpha: float) -> np.ndarray:
        if variant in ("base", "random", "diversity", "wo_if", "wo_uf", "reranking"):
            # no feature edit and no counterfactual blend for these rows
            return self.base[row].copy()
        return (1.0 - alpha) * self.edit[row] + alpha * self.edit_noid[row]

    def slates(
        self,
        variant: str,
        alpha: float = 0.0,
        beta: float = 0.0,
        k_targets: int = 3,
        mode: str = "test",
        model_override=None,
    ) -> list[detect.RecommendationSlate]:
        """Top-k slates for a variant at fixed knob values."""
        excludes = self._excludes(mode)
        out = []
        rng = np.random.default_rng(self.seed)
        cats = self.dataset.item_categories
        for row, user in enumerate(self.cohort.users):
            if model_override is not None:
                y = model_override.score_items(int(user)).astype(np.float64)
            else:
                y = self._blend(variant, row, alpha)
            y[excludes[row]] = -np.inf
            if variant == "random":
                pool = np.flatnonzero(np.isfinite(y))
                items = rng.choice(pool, size=min(self.k, len(pool)), replace=False)
            elif variant == "diversity":
                items = _diversity_rerank(y, cats, self.k)
            else:
                r = self._r_row(variant, row, k_targets)
                if r is None:
                    top = _top_k(y, self.k)
                else:
                    adjusted = y + beta * r
                    top = _top_k(adjusted, self.k, tie_scores=y)
                items = top
            finite = np.isfinite(y[items])
            items = np.asarray(items)[finite]
            out.append(detect.RecommendationSlate(
                user=int(user), items=items,
                provenance={"variant": variant, "alpha": alpha, "beta": beta},
                truncated=len(items) < self.k,
            ))
        return out

    def valid_recall(self, slates: list[detect.RecommendationSlate]) -> float:
        values = []
        for row, slate in enumerate(slates):
            if len(self.valid_pos[row]) == 0:
                continue
            values.append(detect.recall_at_k(slate.items, self.valid_pos[row]))
        return macro_mean(values)


def _diversity_rerank(scores: np.ndarray, item_categories: np.ndarray, k: int) -> np.ndarray:
    """Greedy topic diversification over the top-scored candidate pool.

    Picks items maximizing blended base score minus mean category-vector
    cosine similarity to the already-chosen items.
    """
    pool = _top_k(scores, min(DIVERSITY_POOL, int(np.isfinite(scores).sum())))
    vectors = item_categories[pool].astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    norms[norms == 0] = 1.0
    vectors = vectors / norms[:, None]
    chosen: list[int] = []
    remaining = list(range(len(pool)))
    for _ in range(min(k, len(pool))):
        if not chosen:
            pick = remaining[0]     # pool is already ordered by score
        else:
            sims = vectors[remaining] @ vectors[chosen].T
            objective = (
                DIVERSITY_BLEND * scores[pool[remaining]]
                - (1 - DIVERSITY_BLEND) * sims.mean(axis=1)
            )
            pick = remaining[int(np.argmax(objective))]
        chosen.append(pick)
        remaining.remove(pick)
    return pool[np.asarray(chosen, dtype=np.int64)]


# ---------------------------------------------------------------------------
# Metrics over slates
# ---------------------------------------------------------------------------

def evaluate_slates(
    runner: ScenarioRunner, slates: list[detect.RecommendationSlate]
) -> dict[str, float]:
    """Macro-averaged metric row for one variant's test slates."""
    cohort, dataset = runner.cohort, runner.dataset
    cats = dataset.item_categories
    columns = SCENARIO_COLUMNS[cohort.scenario]
    acc: dict[str, list[float]] = {c: [] for c in columns}
    dists = np.asarray([dataset.category_distribution(s.items) for s in slates])
    for row, slate in enumerate(slates):
        test_pos = runner.test_pos[row]
        if len(test_pos):
            acc["recall"].append(detect.recall_at_k(slate.items, test_pos))
            acc["ndcg"].append(detect.ndcg_at_k(slate.items, test_pos))
            if "w_ndcg" in acc:
                acc["w_ndcg"].append(detect.w_ndcg_at_k(
                    slate.items, test_pos, int(cohort.h_hat[row]), cats
                ))
        acc["coverage"].append(detect.coverage(slate.items, cats))
        if "mcd" in acc:
            acc["mcd"].append(detect.tcd(slate.items, int(cohort.h_bar[row]), cats))
        if "tcd" in acc:
            acc["tcd"].append(detect.tcd(slate.items, int(cohort.h_hat[row]), cats))
    if "iso_index" in acc:
        groups = sorted(set(cohort.labels.tolist()))
        exposures = []
        for g in groups:
            rows = np.flatnonzero(cohort.labels == g)
            exposures.append(detect.exposure_counts(
                [slates[r].items for r in rows], dataset.n_items
            ))
        acc["iso_index"] = [detect.pairwise_isolation(exposures)]
    if "dis_euc" in acc:
        groups = sorted(set(cohort.labels.tolist()))
        means = {g: dists[cohort.labels == g].mean(axis=0) for g in groups}
        for row in range(len(slates)):
            own = cohort.labels[row]
            target = next(g for g in groups if g != own)
            acc["dis_euc"].append(detect.dis_euc(dists[row], means[own], means[target]))
    result = {c: macro_mean(v) for c, v in acc.items()}
    result["n_users"] = len(slates)
    return result


# ---------------------------------------------------------------------------
# Grid search over control knobs and model hyperparameters
# ---------------------------------------------------------------------------

VARIANT_KNOBS = {
    "base": {}, "random": {}, "diversity": {}, "wo_if": {}, "wo_uf": {},
    "change_uf": {"alpha": [0.0]}, "mask_uf": {"alpha": [0.0]},
    "uci": {"alpha": "alpha_grid"},
    "reranking": {"beta": "beta_grid"},
    "f_uci": {"alpha": "alpha_grid", "beta": "beta_grid"},
    "c_uci": {"alpha": "alpha_grid", "beta": "beta_grid", "k_targets": "k_targets_grid"},
}


def _knob_grid(variant: str, config: ExperimentConfig) -> list[dict]:
    spec = VARIANT_KNOBS[variant]
    grids = {}
    for knob, source in spec.items():
        grids[knob] = getattr(config, source) if isinstance(source, str) else source
    combos = [{}]
    for knob, values in grids.items():
        combos = [dict(c, **{knob: v}) for c in combos for v in values]
    return combos


def tune_variant(
    runner: ScenarioRunner, variant: str, config: ExperimentConfig, log: list | None = None
) -> dict:
    """Exhaustive knob grid for one variant, selected by validation Recall@k."""
    combos = _knob_grid(variant, config)
    if len(combos) == 1:
        return combos[0]
    best, best_recall = None, -1.0
    for combo in combos:
        slates = runner.slates(variant, mode="valid", **combo)
        recall = runner.valid_recall(slates)
        if log is not None:
            log.append({"variant": variant, "params": combo, "valid_recall": recall})
        if recall > best_recall:
            best, best_recall = combo, recall
    return best


def train_model(
    dataset: Dataset, config: ExperimentConfig, layout: FeatureLayout | None = None
):
    """Train the configured model kind with sampled negatives and
    validation-recall early stopping."""
    if dataset.train_negatives is None:
        dataset.train_negatives = sample_negatives(dataset, config.seed)
    if layout is None:
        layout = FeatureLayout.from_dataset(dataset)
    X = np.vstack([dataset.train, dataset.train_negatives])
    y = np.concatenate([
        np.ones(len(dataset.train)), np.zeros(len(dataset.train_negatives))
    ])
    common = dict(
        layout=layout, n_factors=config.n_factors,
        learning_rate=config.learning_rate, l2=config.l2,
        n_epochs=config.n_epochs, batch_size=config.batch_size,
        patience=config.patience, seed=config.seed, verbose=config.verbose,
    )
    if config.model == "fm":
        model = FMRecommender(**common)
    elif config.model == "nfm":
        model = NFMRecommender(hidden=config.hidden, **common)
    else:
        raise ValueError(f"unknown model kind {config.model!r}")
    valid = RankingValidation.from_dataset(dataset, "valid", k=config.k)
    return model.fit(X, y, valid=valid)


def grid_search_models(dataset: Dataset, config: ExperimentConfig,
                       lr_grid=(0.001, 0.01, 0.05), l2_grid=(0.0, 0.1, 0.2),
                       hidden_grid=(4, 8, 16, 32), log: list | None = None):
    """Exhaustive model hyperparameter grid by validation Recall@k."""
    import dataclasses
    best, best_recall, best_params = None, -1.0, None
    hiddens = hidden_grid if config.model == "nfm" else (config.hidden,)
    valid = RankingValidation.from_dataset(dataset, "valid", k=config.k)
    for lr in lr_grid:
        for l2 in l2_grid:
            for hidden in hiddens:
                cfg = dataclasses.replace(
                    config, learning_rate=lr, l2=l2, hidden=hidden
                )
                model = train_model(dataset, cfg)
                recall = model.ranking_recall(valid)
                params = {"learning_rate": lr, "l2": l2, "hidden": hidden}
                if log is not None:
                    log.append({"params": params, "valid_recall": recall})
                if recall > best_recall:
                    best, best_recall, best_params = model, recall, params
    return best, best_params, best_recall


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def emit_table(
    rows: dict[str, dict[str, float]], scenario: str, out_dir=None
) -> tuple[dict, str]:
    """Render variant metric rows as JSON plus an aligned text table.

    Best value per column is bolded; arrows mark the preferred
    direction. All rows must come from the same cohort.
    """
    columns = SCENARIO_COLUMNS[scenario]
    sizes = {r.get("n_users") for r in rows.values()}
    if len(sizes) > 1:
        raise CohortMismatchError(f"variants evaluated on different cohorts: {sizes}")
    table = {
        "scenario": scenario,
        "columns": columns,
        "n_users": next(iter(sizes)) if sizes else 0,
        "rows": {v: {c: rows[v].get(c) for c in columns} for v in rows},
    }
    best = {}
    for c in columns:
        values = {v: rows[v][c] for v in rows if rows[v].get(c) is not None}
        if values:
            pick = min if c in LOWER_IS_BETTER else max
            best[c] = pick(values, key=values.get)
    headers = ["method"] + [
        f"{c}{'↓' if c in LOWER_IS_BETTER else '↑'}" for c in columns
    ]
    lines = []
    for v in rows:
        cells = [v]
        for c in columns:
            value = rows[v].get(c)
            text = "-" if value is None else f"{value:.4f}"
            if best.get(c) == v:
                text = f"**{text}**"
            cells.append(text)
        lines.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    text = "\n".join([fmt(headers)] + [fmt(row) for row in lines]) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.json").write_text(json.dumps(table, indent=2), encoding="utf-8")
        (out_dir / "table.txt").write_text(text, encoding="utf-8")
    return table, text


def write_slates(slates: list[detect.RecommendationSlate], dataset: Dataset, path) -> None:
    """One line per user: user_id \t comma-joined item ids."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for slate in slates:
            items = ",".join(dataset.item_ids[i] for i in slate.items)
            fh.write(f"{dataset.user_ids[slate.user]}\t{items}\n")


def read_slates(path, dataset: Dataset) -> list[detect.RecommendationSlate]:
    slates = []
    uindex, iindex = dataset.user_index, dataset.item_index
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            user_id, items_s = line.split("\t")
            items = np.asarray([iindex[i] for i in items_s.split(",") if i], dtype=np.int64)
            slates.append(detect.RecommendationSlate(user=uindex[user_id], items=items))
    return slates


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Train (or load) the model, tune each variant, and emit the result table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = Dataset.load(config.data_dir)
    if config.model_path:
        model = load_model(config.model_path, dataset)
    else:
        model = train_model(dataset, config)
    cohort = select_cohort(
        config.scenario, dataset, config.user_fine_attribute, config.user_coarse_attribute
    )
    predictor = None
    if "c_uci" in config.variants:
        predictor = control.train_category_predictor(
            dataset, hidden=config.predictor_hidden,
            n_epochs=config.predictor_epochs, seed=config.seed,
        )
    runner = ScenarioRunner(dataset, model, cohort, k=config.k,
                            predictor=predictor, seed=config.seed)
    wo_model = None
    if "wo_if" in config.variants:
        layout = FeatureLayout.from_dataset(dataset, use_item_cats=False)
        wo_model = train_model(dataset, config, layout=layout)
    elif "wo_uf" in config.variants:
        layout = FeatureLayout.from_dataset(dataset, use_user_attrs=False)
        wo_model = train_model(dataset, config, layout=layout)

    grid_log: list[dict] = []
    rows: dict[str, dict] = {}
    tuned: dict[str, dict] = {}
    for variant in config.variants:
        knobs = tune_variant(runner, variant, config, log=grid_log)
        tuned[variant] = knobs
        override = wo_model if variant in ("wo_if", "wo_uf") else None
        slates = runner.slates(variant, mode="test", model_override=override, **knobs)
        rows[variant] = evaluate_slates(runner, slates)
        write_slates(slates, dataset, out_dir / f"slates_{variant}.tsv")
    table, text = emit_table(rows, config.scenario, out_dir)
    with (out_dir / "grid_log.jsonl").open("w", encoding="utf-8") as fh:
        for entry in grid_log:
            fh.write(json.dumps(entry) + "\n")
    (out_dir / "tuned.json").write_text(json.dumps(tuned, indent=2), encoding="utf-8")
    return {"table": table, "text": text, "tuned": tuned}
