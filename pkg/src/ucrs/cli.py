"""Command-line interface: data preparation, training, control, reports,
evaluation, and serving."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import click
import numpy as np

from . import control as control_mod
from . import detect, evaluate
from .data import (Dataset, build_dataset, convert_ml1m, load_interactions,
                   load_item_categories, load_user_features, sample_negatives)
from .model import load_model
from .service import ServingSnapshot, create_app


@click.group()
def main():
    """User-controllable recommender engine."""


@main.group()
def data():
    """Dataset preparation commands."""


@data.command("prepare")
@click.option("--interactions", "interactions_path", required=True, type=click.Path(exists=True))
@click.option("--user-features", "user_features_path", type=click.Path(exists=True))
@click.option("--item-categories", "item_categories_path", required=True, type=click.Path(exists=True))
@click.option("--kcore", default=10, show_default=True)
@click.option("--threshold", default=4, show_default=True)
@click.option("--single-label", is_flag=True, help="Keep only the first listed category per item.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def data_prepare(interactions_path, user_features_path, item_categories_path,
                 kcore, threshold, single_label, out_dir, seed):
    """Filter, binarize, split, and index an interaction log."""
    interactions = load_interactions(interactions_path)
    categories = load_item_categories(item_categories_path, single_label=single_label)
    features = load_user_features(user_features_path) if user_features_path else None
    dataset = build_dataset(
        interactions, categories, features, kcore=kcore, positive_threshold=threshold
    )
    dataset.train_negatives = sample_negatives(dataset, seed)
    dataset.save(out_dir)
    manifest = dataset.summary()
    manifest["seed"] = seed
    manifest["kcore"] = kcore
    manifest["threshold"] = threshold
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    click.echo(json.dumps(manifest, indent=2))


@data.command("convert-ml1m")
@click.option("--raw", "raw_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def data_convert_ml1m(raw_dir, out_dir):
    """Convert raw MovieLens-1M files into the package's input formats."""
    paths = convert_ml1m(raw_dir, out_dir)
    click.echo(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_kind", type=click.Choice(["fm", "nfm"]), default="fm", show_default=True)
@click.option("--lr", default=0.05, show_default=True)
@click.option("--l2", default=0.0, show_default=True)
@click.option("--hidden", default=16, show_default=True)
@click.option("--factors", default=64, show_default=True)
@click.option("--epochs", default=100, show_default=True)
@click.option("--batch-size", default=1024, show_default=True)
@click.option("--patience", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--verbose", is_flag=True)
def train(data_dir, model_kind, lr, l2, hidden, factors, epochs, batch_size,
          patience, seed, out_path, verbose):
    """Train FM or NFM and save a checkpoint."""
    dataset = Dataset.load(data_dir)
    config = evaluate.ExperimentConfig(
        data_dir=data_dir, scenario="item_coarse", model=model_kind,
        n_factors=factors, learning_rate=lr, l2=l2, hidden=hidden,
        n_epochs=epochs, batch_size=batch_size, patience=patience, seed=seed,
        verbose=verbose,
    )
    model = evaluate.train_model(dataset, config)
    model.save(out_path)
    best = max((h.get("valid_recall", 0.0) for h in model.history_), default=0.0)
    click.echo(json.dumps({
        "model": model_kind, "epochs_run": len(model.history_),
        "best_valid_recall": best, "checkpoint": str(out_path),
    }, indent=2))


@main.command("train-predictor")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--hidden", default=16, show_default=True)
@click.option("--epochs", default=200, show_default=True)
@click.option("--lr", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def train_predictor(data_dir, hidden, epochs, lr, seed, out_path):
    """Train the target-category transition predictor."""
    dataset = Dataset.load(data_dir)
    predictor = control_mod.train_category_predictor(
        dataset, hidden=hidden, learning_rate=lr, n_epochs=epochs, seed=seed
    )
    predictor.save(out_path)
    click.echo(json.dumps({
        "final_loss": predictor.history_[-1]["loss"], "checkpoint": str(out_path),
    }, indent=2))


@main.command("control")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--predictor", "predictor_path", type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--user", "user_id", required=True)
@click.option("--command", "command_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=10, show_default=True)
def control_cmd(model_path, predictor_path, data_dir, user_id, command_path, k):
    """Apply a control command for one user and print the adjusted slate."""
    dataset = Dataset.load(data_dir)
    model = load_model(model_path, dataset)
    predictor = (
        control_mod.CategoryTransitionPredictor.load(predictor_path)
        if predictor_path else None
    )
    if user_id not in dataset.user_index:
        raise click.ClickException(f"unknown user {user_id!r}")
    user = dataset.user_index[user_id]
    payload = json.loads(Path(command_path).read_text(encoding="utf-8"))
    command = control_mod.parse_command(payload, dataset)
    slate = control_mod.apply_control(model, dataset, user, command, k=k, predictor=predictor)
    click.echo(json.dumps({
        "user_id": user_id,
        "items": [dataset.item_ids[i] for i in slate.items],
        "scores": [float(s) for s in slate.scores],
        "provenance": slate.provenance,
        "truncated": slate.truncated,
    }, indent=2))


@main.command("report")
@click.option("--slates", "slates_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--groupby", type=click.Choice(["gender", "age", "majority-category"]),
              default="majority-category", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def report(slates_path, data_dir, groupby, out_path):
    """Bubble metrics per cohort plus history-vs-recommendation tables."""
    dataset = Dataset.load(data_dir)
    slates = evaluate.read_slates(slates_path, dataset)
    payload = build_report_payload(dataset, slates, groupby)
    Path(out_path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    click.echo(f"wrote {out_path}")


def build_report_payload(dataset: Dataset, slates, groupby: str) -> dict:
    train_pos = dataset.positives_by_user("train")
    users = [s.user for s in slates]
    if groupby == "majority-category":
        labels = []
        for s in slates:
            top = dataset.majority_category(s.user, "train")
            labels.append(dataset.category_names[top] if top is not None else "(no history)")
    else:
        if groupby not in dataset.attribute_groups:
            raise click.ClickException(f"dataset has no attribute group {groupby!r}")
        start, stop = dataset.attribute_groups[groupby]
        labels = [
            dataset.feature_names[start + int(np.argmax(dataset.user_features[u, start:stop]))]
            for u in users
        ]
    labels = np.asarray(labels)
    history_dists = np.asarray([
        dataset.category_distribution(train_pos[s.user]) for s in slates
    ])
    slate_dists = np.asarray([dataset.category_distribution(s.items) for s in slates])
    amplification = detect.bias_amplification_report(history_dists, slate_dists, labels)
    groups = sorted(set(labels.tolist()))
    exposures = [
        detect.exposure_counts(
            [s.items for s, l in zip(slates, labels) if l == g], dataset.n_items
        )
        for g in groups
    ]
    metrics = {}
    for g in groups:
        rows = [s for s, l in zip(slates, labels) if l == g]
        cov = detect.macro_mean([detect.coverage(s.items, dataset.item_categories) for s in rows])
        mcds = [
            detect.mcd(s.items, train_pos[s.user], dataset.item_categories)
            for s in rows if len(train_pos[s.user])
        ]
        metrics[g] = {
            "n_users": len(rows),
            "coverage": cov,
            "mcd": detect.macro_mean(mcds) if mcds else None,
        }
    payload = {
        "groupby": groupby,
        "categories": dataset.category_names,
        "groups": metrics,
        "bias_amplification": amplification,
    }
    if len(groups) >= 2:
        payload["isolation"] = {
            "pairwise_mean": detect.pairwise_isolation(exposures),
            "pairs": {
                f"{groups[i]}|{groups[j]}": detect.isolation_index(exposures[i], exposures[j])
                for i in range(len(groups)) for j in range(i + 1, len(groups))
            },
        }
    return payload


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def eval_cmd(config_path, out_dir):
    """Run a full evaluation scenario from a YAML config."""
    config = evaluate.ExperimentConfig.from_yaml(config_path)
    result = evaluate.run_experiment(config, out_dir)
    click.echo(result["text"])


@main.command("snapshot")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--predictor", "predictor_path", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def snapshot(data_dir, model_path, predictor_path, out_dir):
    """Assemble a serving snapshot directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("arrays.npz", "vocab.json", "manifest.json"):
        shutil.copy2(Path(data_dir) / name, out / name)
    shutil.copy2(model_path, out / "model.bin")
    if predictor_path:
        shutil.copy2(predictor_path, out / "predictor.bin")
    click.echo(f"snapshot assembled at {out}")


@main.command("serve")
@click.option("--snapshot", "snapshot_dir", required=True, type=click.Path(exists=True))
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--cors-origin", default=None)
@click.option("--k", default=10, show_default=True)
def serve(snapshot_dir, port, host, cors_origin, k):
    """Serve the snapshot over HTTP."""
    import uvicorn

    snap = ServingSnapshot.load(snapshot_dir, k=k)
    app = create_app(snap, cors_origin=cors_origin)
    app.state.snapshot_dir = snapshot_dir
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
