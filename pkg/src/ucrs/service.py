"""HTTP JSON API over a frozen snapshot: recommendations, bubble reports,
and control application. Stateless per request; the snapshot never mutates."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import control, detect
from .data import Dataset
from .errors import InvalidCommandError, UnknownUserError
from .model import load_model


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


class ServingSnapshot:
    """Immutable bundle: dataset + model (+ predictor) + precomputed
    baseline slates and per-user bubble reports."""

    def __init__(self, dataset: Dataset, model, predictor=None, version: str = "dev", k: int = 10):
        self.dataset = dataset
        self.model = model
        self.predictor = predictor
        self.version = version
        self.k = k
        self.baseline_slates = [
            control.baseline_slate(model, dataset, u, k=k)
            for u in range(dataset.n_users)
        ]
        self._group_iso = self._majority_group_isolation()
        self.reports = [self._build_report(u) for u in range(dataset.n_users)]

    @classmethod
    def load(cls, snapshot_dir, k: int = 10) -> "ServingSnapshot":
        snapshot_dir = Path(snapshot_dir)
        dataset = Dataset.load(snapshot_dir)
        model = load_model(snapshot_dir / "model.bin", dataset)
        predictor_path = snapshot_dir / "predictor.bin"
        predictor = (
            control.CategoryTransitionPredictor.load(predictor_path)
            if predictor_path.exists() else None
        )
        digest = hashlib.sha256()
        for name in ("manifest.json", "model.bin"):
            digest.update((snapshot_dir / name).read_bytes())
        return cls(dataset, model, predictor, version=digest.hexdigest()[:16], k=k)

    def _majority_group_isolation(self) -> dict[int, float]:
        """Mean isolation of each train-majority-category user group
        against every other group, over the baseline slates."""
        majority = {}
        for u in range(self.dataset.n_users):
            top = self.dataset.majority_category(u, "train")
            if top is not None:
                majority.setdefault(top, []).append(u)
        exposures = {
            c: detect.exposure_counts(
                [self.baseline_slates[u].items for u in users], self.dataset.n_items
            )
            for c, users in majority.items()
        }
        iso = {}
        for c in exposures:
            others = [
                detect.isolation_index(exposures[c], exposures[o])
                for o in exposures
                if o != c and exposures[c].sum() > 0 and exposures[o].sum() > 0
            ]
            iso[c] = float(np.mean(others)) if others else 0.0
        return iso

    def _build_report(self, user: int) -> detect.BubbleReport:
        train_items = self.dataset.positives_by_user("train")[user]
        top = self.dataset.majority_category(user, "train")
        iso = self._group_iso.get(top, 0.0) if top is not None else 0.0
        ts = self.dataset.train_ts
        window = (int(ts.min()), int(ts.max())) if len(ts) else None
        return detect.build_report(
            self.baseline_slates[user], train_items,
            self.dataset.item_categories, iso_index=iso, window=window,
        )

    def resolve_user(self, user_id: str) -> int:
        if user_id not in self.dataset.user_index:
            raise UnknownUserError(f"unknown user {user_id!r}")
        return self.dataset.user_index[user_id]


def slate_payload(snapshot: ServingSnapshot, slate: detect.RecommendationSlate) -> dict:
    ds = snapshot.dataset
    items = []
    for pos, item in enumerate(slate.items):
        cats = [ds.category_names[c] for c in np.flatnonzero(ds.item_categories[item])]
        entry = {"item_id": ds.item_ids[item], "categories": cats}
        if slate.scores is not None:
            entry["score"] = float(slate.scores[pos])
        items.append(entry)
    return {
        "user_id": ds.user_ids[slate.user],
        "items": items,
        "provenance": slate.provenance,
        "truncated": slate.truncated,
    }


def control_response(snapshot: ServingSnapshot, user: int, payload: dict, k: int = 10) -> dict:
    """Apply a command and summarize the change against the baseline slate."""
    ds = snapshot.dataset
    command = control.parse_command(payload, ds)
    adjusted = control.apply_control(
        snapshot.model, ds, user, command, k=k, predictor=snapshot.predictor
    )
    baseline = (
        snapshot.baseline_slates[user]
        if k == snapshot.k
        else control.baseline_slate(snapshot.model, ds, user, k=k)
    )
    cats = ds.item_categories
    train_items = ds.positives_by_user("train")[user]

    def summary(slate):
        entry = {"coverage": detect.coverage(slate.items, cats) if len(slate.items) else 0.0}
        entry["mcd"] = (
            detect.mcd(slate.items, train_items, cats)
            if len(train_items) and len(slate.items) else None
        )
        targets = adjusted.provenance.get("targets")
        entry["tcd"] = _tcd_any(slate.items, targets, cats) if targets else None
        return entry

    base_items = set(baseline.items.tolist())
    adj_items = set(adjusted.items.tolist())
    delta = {
        "entered": [ds.item_ids[i] for i in adjusted.items if i not in base_items],
        "left": [ds.item_ids[i] for i in baseline.items if i not in adj_items],
        "before": summary(baseline),
        "after": summary(adjusted),
    }
    return {
        "baseline": slate_payload(snapshot, baseline),
        "adjusted": slate_payload(snapshot, adjusted),
        "delta": delta,
    }


def _tcd_any(items, targets, item_categories) -> float:
    """Fraction of the slate carrying any of the target categories."""
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        return 0.0
    targets = np.asarray(targets, dtype=np.int64)
    return float(np.mean(item_categories[np.ix_(items, targets)].any(axis=1)))


def create_app(snapshot: ServingSnapshot, cors_origin: str | None = None) -> FastAPI:
    app = FastAPI(title="ucrs", version="0.1.0")
    app.state.snapshot = snapshot
    if cors_origin:
        app.add_middleware(
            CORSMiddleware, allow_origins=[cors_origin],
            allow_methods=["*"], allow_headers=["*"],
        )

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    @app.exception_handler(Exception)
    async def _unexpected_error(request: Request, exc: Exception):
        # structured body, never a traceback
        return JSONResponse(
            status_code=500,
            content={"code": "internal_error", "message": type(exc).__name__},
        )

    def current() -> ServingSnapshot:
        return app.state.snapshot

    def resolve(user_id: str) -> int:
        try:
            return current().resolve_user(user_id)
        except UnknownUserError as exc:
            raise ServiceError(404, "unknown_user", str(exc))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": current().version}

    @app.get("/users/{user_id}/recommendations")
    def recommendations(user_id: str, k: int = 10):
        snap = current()
        user = resolve(user_id)
        if k < 0:
            raise ServiceError(422, "invalid_k", f"k must be >= 0, got {k}")
        if k == snap.k:
            slate = snap.baseline_slates[user]
        else:
            slate = control.baseline_slate(snap.model, snap.dataset, user, k=k)
        return slate_payload(snap, slate)

    @app.post("/users/{user_id}/controls")
    def controls(user_id: str, payload: dict, k: int = 10):
        snap = current()
        user = resolve(user_id)
        try:
            return control_response(snap, user, payload, k=k)
        except InvalidCommandError as exc:
            raise ServiceError(422, "invalid_command", str(exc))

    @app.get("/users/{user_id}/bubble-report")
    def bubble_report(user_id: str):
        snap = current()
        user = resolve(user_id)
        ds = snap.dataset
        train_items = ds.positives_by_user("train")[user]
        return {
            "user_id": user_id,
            "report": snap.reports[user].to_dict(),
            "history_distribution": ds.category_distribution(train_items).tolist(),
            "recommendation_distribution":
                ds.category_distribution(snap.baseline_slates[user].items).tolist(),
            "categories": ds.category_names,
        }

    @app.get("/catalog/categories")
    def categories():
        return {"categories": current().dataset.category_names}

    @app.get("/catalog/user-features")
    def user_features():
        ds = current().dataset
        groups = {
            name: [ds.feature_names[i].split("=", 1)[1] for i in range(start, stop)]
            for name, (start, stop) in ds.attribute_groups.items()
        }
        return {"groups": groups}

    @app.get("/users/{user_id}/history")
    def history(user_id: str):
        snap = current()
        user = resolve(user_id)
        ds = snap.dataset
        events = []
        for (u, item), ts in zip(ds.train, ds.train_ts):
            if u != user:
                continue
            cats = [ds.category_names[c] for c in np.flatnonzero(ds.item_categories[item])]
            events.append({"item_id": ds.item_ids[item], "timestamp": int(ts), "categories": cats})
        events.sort(key=lambda e: e["timestamp"])
        features = [ds.feature_names[f] for f in np.flatnonzero(ds.user_features[user])]
        return {"user_id": user_id, "events": events, "features": features}

    @app.post("/admin/reload")
    def reload(snapshot_dir: str | None = None):
        path = snapshot_dir or getattr(app.state, "snapshot_dir", None)
        if path is None:
            raise ServiceError(422, "no_snapshot_dir", "no snapshot directory configured")
        app.state.snapshot = ServingSnapshot.load(path, k=current().k)
        return {"status": "reloaded", "version": app.state.snapshot.version}

    return app
