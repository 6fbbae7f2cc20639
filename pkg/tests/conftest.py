"""Shared synthetic fixtures: a small dataset with planted structure
(gendered tastes, preference-shift users) and a model trained on it."""

import numpy as np
import pytest

from ucrs.data import (Dataset, RawInteraction, build_dataset, sample_negatives)
from ucrs.model import FeatureLayout, FMRecommender, RankingValidation


N_CATEGORIES = 8
ITEMS_PER_CATEGORY = 40         # large enough that heavy users cannot exhaust a category
N_USERS = 120
STEPS_PER_USER = 30
SHIFT_FRACTION = 0.3            # users whose preference moves late in the timeline


def make_synthetic_interactions(seed=7):
    """Deterministic corpus: each user favors one category; a fraction
    switches to another category for the last 20% of their timeline, so
    the global 80/10/10 time split yields preference-shift users."""
    rng = np.random.default_rng(seed)
    items = []
    item_cats = {}
    for c in range(N_CATEGORIES):
        for j in range(ITEMS_PER_CATEGORY):
            item_id = f"i{c}{j:02d}"
            cats = [f"cat{c}"]
            if rng.random() < 0.2:
                cats.append(f"cat{(c + 3) % N_CATEGORIES}")
            items.append(item_id)
            item_cats[item_id] = cats
    by_cat = {c: [f"i{c}{j:02d}" for j in range(ITEMS_PER_CATEGORY)] for c in range(N_CATEGORIES)}

    user_features = {}
    interactions = []
    n_shift = int(N_USERS * SHIFT_FRACTION)
    for u in range(N_USERS):
        user_id = f"u{u:03d}"
        gender = "F" if u % 2 == 0 else "M"
        age = ["18", "25", "35"][u % 3]
        user_features[user_id] = {"gender": gender, "age": age}
        # gendered taste: F users favor low categories, M users high
        base = rng.integers(0, 4) if gender == "F" else rng.integers(4, 8)
        shift = (base + 4) % N_CATEGORIES
        shifts = u < n_shift
        for step in range(STEPS_PER_USER):
            cat = shift if (shifts and step >= int(0.8 * STEPS_PER_USER)) else base
            if rng.random() < 0.15:
                cat = int(rng.integers(0, N_CATEGORIES))
                rating = int(rng.integers(1, 6))
            else:
                rating = int(rng.integers(4, 6))
            item_id = by_cat[int(cat)][int(rng.integers(ITEMS_PER_CATEGORY))]
            # global clock: step-major so per-user timelines split like the corpus
            timestamp = step * N_USERS + u
            interactions.append(RawInteraction(user_id, item_id, rating, timestamp))
    return interactions, user_features, item_cats


@pytest.fixture(scope="session")
def synth_dataset() -> Dataset:
    interactions, user_features, item_cats = make_synthetic_interactions()
    dataset = build_dataset(
        interactions, item_cats, user_features, kcore=3, positive_threshold=4
    )
    dataset.train_negatives = sample_negatives(dataset, seed=11)
    return dataset


@pytest.fixture(scope="session")
def synth_model(synth_dataset):
    layout = FeatureLayout.from_dataset(synth_dataset)
    X = np.vstack([synth_dataset.train, synth_dataset.train_negatives])
    y = np.concatenate([
        np.ones(len(synth_dataset.train)), np.zeros(len(synth_dataset.train_negatives))
    ])
    model = FMRecommender(
        layout=layout, n_factors=16, learning_rate=0.05,
        n_epochs=40, batch_size=256, patience=10, seed=3,
    )
    valid = RankingValidation.from_dataset(synth_dataset, "valid")
    return model.fit(X, y, valid=valid)


@pytest.fixture(scope="session")
def snapshot_dir(tmp_path_factory, synth_dataset, synth_model):
    from ucrs.control import train_category_predictor

    out = tmp_path_factory.mktemp("snapshot")
    synth_dataset.save(out)
    synth_model.save(out / "model.bin")
    predictor = train_category_predictor(synth_dataset, hidden=16, n_epochs=60, seed=5)
    predictor.save(out / "predictor.bin")
    return out
