"""Closed-loop serving: backbone inference, expert verdicts, parallel retraining.

One process serves segmentation requests from terminals against an
immutable backbone snapshot while a parallel model retrains on
expert-rejected samples in a background thread; completed weights replace
the backbone through one atomic reference swap, so inference never pauses
and every response reports exactly the digest it ran under.

Durability: every state change appends one fsync'd JSON line to
``events.jsonl`` under the data root (image, mask, and checkpoint bytes
live in files next to it); restart replays the log.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    IGNORE_INDEX,
    NUM_CLASSES,
    SampleRecord,
    indices_to_rgb,
    load_image,
    load_mask,
    palette_json,
)
from .model import ModelConfig, build_model, config_to_dict, count_flops, count_params, model_params
from .train import TrainConfig, predict, train

log = logging.getLogger(__name__)

PENDING, QUALIFIED, UNQUALIFIED, ENROLLED = "pending_review", "qualified", "unqualified", "enrolled"


class ServiceError(Exception):
    http_status = 500


class RequestError(ServiceError):
    http_status = 400


class NotFoundError(ServiceError):
    http_status = 404


class ConflictError(ServiceError):
    http_status = 409


class StateLogError(ServiceError):
    """The durable event log is unreadable mid-stream."""


# -- wire codecs -------------------------------------------------------------


def decode_image_b64(data: str) -> np.ndarray:
    """Base64 PNG/JPEG → (H, W, 3) float image; undecodable input raises."""
    try:
        raw = base64.b64decode(data, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except (binascii.Error, UnidentifiedImageError, OSError, ValueError) as e:
        raise RequestError(f"undecodable image: {e}") from e
    return np.asarray(img, dtype=np.float64) / 255.0


def encode_mask_payload(mask: np.ndarray) -> dict:
    """Class-index map → {width, height, data}: one raw byte per pixel,
    row-major, base64 — trivially reconstructable on any client."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return {
        "width": int(mask.shape[1]),
        "height": int(mask.shape[0]),
        "data": base64.b64encode(mask.tobytes()).decode("ascii"),
    }


def decode_mask_payload(payload: dict) -> np.ndarray:
    if not isinstance(payload, dict):
        raise RequestError("mask payload must be an object with width/height/data")
    try:
        w, h = int(payload["width"]), int(payload["height"])
        raw = base64.b64decode(payload["data"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise RequestError(f"bad mask payload: {e}") from e
    if w < 1 or h < 1 or len(raw) != w * h:
        raise RequestError(f"mask payload is {len(raw)} bytes, expected {w}x{h}={w * h}")
    mask = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    bad = ~(np.isin(mask, list(range(NUM_CLASSES)) + [IGNORE_INDEX]))
    if bad.any():
        raise RequestError(f"mask holds invalid class index {int(mask[bad].flat[0])}")
    return mask.copy()


# -- state -------------------------------------------------------------------


@dataclass
class PredictionRecord:
    id: str
    terminal_id: str
    image_path: str      # relative to the data root
    mask_path: str
    digest: str
    status: str = PENDING
    history: list = field(default_factory=lambda: [PENDING])
    created_at: float = 0.0
    updated_at: float = 0.0


@dataclass
class Deployment:
    digest: str
    checkpoint_path: str
    model: object
    cfg: ModelConfig


@dataclass
class TrainingStatus:
    state: str = "idle"   # idle | training | completed | failed
    progress: float = 0.0
    epochs_done: int = 0
    digest: Optional[str] = None
    dataset_version: Optional[int] = None
    error: Optional[str] = None

    def as_dict(self) -> dict:
        out = {"state": self.state, "progress": round(self.progress, 6)}
        if self.state == "training":
            out["epochs_done"] = self.epochs_done
        if self.digest is not None:
            out["digest"] = self.digest
        if self.dataset_version is not None:
            out["dataset_version"] = self.dataset_version
        if self.error is not None:
            out["error"] = self.error
        return out


class Service:
    """The loop core; all methods are thread-safe."""

    def __init__(self, data_root: str, model_cfg: Optional[ModelConfig] = None, seed: int = 0):
        self.root = data_root
        for sub in ("uploads", "predictions", "enrolled", "checkpoints"):
            os.makedirs(os.path.join(data_root, sub), exist_ok=True)
        self._lock = threading.RLock()
        self._predictions: dict = {}
        self._dataset: list = []          # (image_path, mask_path) pairs, enrollment order
        self._version = 0
        self._training = TrainingStatus()
        self._parallel = None             # (model, digest, checkpoint_path) once completed
        self._thread: Optional[threading.Thread] = None

        log_path = os.path.join(data_root, "events.jsonl")
        existing = os.path.exists(log_path) and os.path.getsize(log_path) > 0
        self._events = open(log_path, "a", encoding="utf-8")
        if existing:
            self._replay(log_path)
        else:
            cfg = model_cfg if model_cfg is not None else ModelConfig()
            model = build_model(cfg, seed=seed)
            path = self._checkpoint_path("seed")
            digest = save_checkpoint(model, os.path.join(self.root, path))
            self._deployment = Deployment(digest, path, model, cfg)
            self._append_event({"type": "deploy", "digest": digest, "checkpoint": path,
                                "reason": "seed"})

    # -- internals -----------------------------------------------------------

    def _checkpoint_path(self, tag: str) -> str:
        return os.path.join("checkpoints", f"{tag}-{uuid.uuid4().hex[:8]}.ckpt")

    def _append_event(self, event: dict) -> None:
        # Callers may pass their own "ts" (it wins over the default) so the
        # timestamp stored on in-memory records and the one replay restores
        # are the same value — listing order then survives a restart even
        # for requests that raced each other.
        event = {"ts": time.time(), **event}
        with self._lock:
            self._events.write(json.dumps(event, sort_keys=True) + "\n")
            self._events.flush()
            os.fsync(self._events.fileno())

    def _replay(self, log_path: str) -> None:
        with open(log_path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        events = []
        for n, line in enumerate(lines):
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as e:
                if n == len(lines) - 1:
                    log.warning("dropping torn final log line: %s", e)
                    break
                raise StateLogError(f"unreadable event log line {n + 1}: {e}") from e
        last_deploy = None
        for ev in events:
            kind = ev.get("type")
            if kind == "deploy":
                last_deploy = ev
                if self._training.state == "completed" and self._training.digest == ev["digest"]:
                    self._training = TrainingStatus()
            elif kind == "prediction":
                self._predictions[ev["id"]] = PredictionRecord(
                    id=ev["id"], terminal_id=ev["terminal_id"], image_path=ev["image"],
                    mask_path=ev["mask"], digest=ev["digest"],
                    created_at=ev["ts"], updated_at=ev["ts"],
                )
            elif kind == "verdict":
                rec = self._predictions.get(ev["prediction_id"])
                if rec is None:
                    raise StateLogError(f"verdict for unknown prediction {ev['prediction_id']}")
                if ev["decision"] == "qualified":
                    rec.status = QUALIFIED
                    rec.history += [QUALIFIED]
                else:
                    rec.status = ENROLLED
                    rec.history += [UNQUALIFIED, ENROLLED]
                    self._dataset.append((ev["enrolled_image"], ev["enrolled_mask"]))
                    self._version += 1
                rec.updated_at = ev["ts"]
            elif kind == "training_started":
                self._training = TrainingStatus(state="training",
                                                dataset_version=ev.get("dataset_version"))
            elif kind == "training_completed":
                self._training = TrainingStatus(
                    state="completed", progress=1.0, digest=ev["digest"],
                    dataset_version=ev.get("dataset_version"),
                )
                self._parallel = (None, ev["digest"], ev["checkpoint"])
            elif kind == "training_failed":
                self._training = TrainingStatus(state="failed", error=ev.get("error"))
        if last_deploy is None:
            raise StateLogError("event log holds no deployment")
        if self._training.state == "training":  # a run died with the old process
            self._training = TrainingStatus()
        model = load_checkpoint(os.path.join(self.root, last_deploy["checkpoint"]))
        self._deployment = Deployment(
            last_deploy["digest"], last_deploy["checkpoint"], model, model.cfg
        )

    # -- inference path ------------------------------------------------------

    def ingest_image(self, terminal_id: str, image_b64: str) -> dict:
        image = decode_image_b64(image_b64)
        deployment = self._deployment  # one snapshot read: digest and weights stay paired
        mask = predict(deployment.model, image)
        pid = uuid.uuid4().hex[:12]
        image_path = os.path.join("uploads", f"{pid}.png")
        mask_path = os.path.join("predictions", f"{pid}.png")
        Image.fromarray((image * 255).round().astype(np.uint8)).save(
            os.path.join(self.root, image_path))
        Image.fromarray(indices_to_rgb(mask)).save(os.path.join(self.root, mask_path))
        with self._lock:
            now = time.time()
            record = PredictionRecord(id=pid, terminal_id=terminal_id, image_path=image_path,
                                      mask_path=mask_path, digest=deployment.digest,
                                      created_at=now, updated_at=now)
            self._predictions[pid] = record
            self._append_event({"ts": now, "type": "prediction", "id": pid,
                                "terminal_id": terminal_id,
                                "image": image_path, "mask": mask_path,
                                "digest": deployment.digest})
        return {"prediction_id": pid, "digest": deployment.digest}

    def list_predictions(self, status: str = PENDING) -> dict:
        if status not in (PENDING, QUALIFIED, UNQUALIFIED, ENROLLED):
            raise RequestError(f"unknown status filter {status!r}")
        with self._lock:
            records = [r for r in self._predictions.values() if r.status == status]
        records.sort(key=lambda r: r.created_at)
        items = []
        for rec in records:
            with open(os.path.join(self.root, rec.image_path), "rb") as f:
                image_b64 = base64.b64encode(f.read()).decode("ascii")
            mask = load_mask(os.path.join(self.root, rec.mask_path))
            items.append({
                "id": rec.id,
                "terminal_id": rec.terminal_id,
                "digest": rec.digest,
                "status": rec.status,
                "created_at": rec.created_at,
                "image": image_b64,
                "mask": encode_mask_payload(mask),
            })
        return {"items": items}

    # -- review path ---------------------------------------------------------

    def submit_verdict(self, prediction_id: str, decision: str,
                       corrected_mask: Optional[dict] = None,
                       reviewer: str = "expert") -> dict:
        if decision not in ("qualified", "unqualified"):
            raise RequestError(f"decision must be qualified or unqualified, got {decision!r}")
        with self._lock:
            record = self._predictions.get(prediction_id)
            if record is None:
                raise NotFoundError(f"unknown prediction {prediction_id}")
            if record.status != PENDING:
                raise ConflictError(f"prediction {prediction_id} already reviewed "
                                    f"({record.status})")
            if decision == "qualified":
                if corrected_mask is not None:
                    raise RequestError("corrected_mask only accompanies unqualified verdicts")
                record.status = QUALIFIED
                record.history.append(QUALIFIED)
                record.updated_at = time.time()
                self._append_event({"ts": record.updated_at, "type": "verdict",
                                    "prediction_id": prediction_id,
                                    "decision": "qualified", "reviewer": reviewer})
                return self._record_payload(record)
            if corrected_mask is None:
                raise RequestError("unqualified verdicts require a corrected_mask")
            mask = decode_mask_payload(corrected_mask)
            predicted = load_mask(os.path.join(self.root, record.mask_path))
            if mask.shape != predicted.shape:
                raise RequestError(f"corrected mask is {mask.shape[::-1]}, "
                                   f"prediction is {predicted.shape[::-1]}")
            enrolled_image = record.image_path
            enrolled_mask = os.path.join("enrolled", f"{prediction_id}.png")
            Image.fromarray(indices_to_rgb(mask)).save(os.path.join(self.root, enrolled_mask))
            record.status = ENROLLED
            record.history += [UNQUALIFIED, ENROLLED]
            record.updated_at = time.time()
            self._dataset.append((enrolled_image, enrolled_mask))
            self._version += 1
            self._append_event({"ts": record.updated_at, "type": "verdict",
                                "prediction_id": prediction_id,
                                "decision": "unqualified", "reviewer": reviewer,
                                "enrolled_image": enrolled_image,
                                "enrolled_mask": enrolled_mask})
            return self._record_payload(record)

    def _record_payload(self, record: PredictionRecord) -> dict:
        return {"id": record.id, "status": record.status, "history": list(record.history),
                "digest": record.digest}

    # -- parallel training ---------------------------------------------------

    def start_training(self, payload: Optional[dict] = None) -> dict:
        payload = payload or {}
        try:
            cfg = TrainConfig(
                epochs=int(payload.get("epochs", 20)),
                batch_size=int(payload.get("batch_size", 8)),
                lr=float(payload.get("lr", 1e-3)),
                seed=int(payload.get("seed", 0)),
            )
        except (TypeError, ValueError) as e:
            raise RequestError(f"bad training config: {e}") from e
        cold_start = bool(payload.get("cold_start", False))
        with self._lock:
            if self._training.state == "training":
                raise ConflictError("a parallel training run is already in progress")
            if not self._dataset:
                raise ConflictError("the training dataset is empty; enroll samples first")
            samples = list(self._dataset)
            version = self._version
            self._training = TrainingStatus(state="training", dataset_version=version)
            self._parallel = None
            self._append_event({"type": "training_started", "dataset_version": version,
                                "epochs": cfg.epochs, "cold_start": cold_start})
            self._thread = threading.Thread(
                target=self._run_training, args=(samples, version, cfg, cold_start),
                name="parallel-training", daemon=True,
            )
            self._thread.start()
        return {"status": "accepted", "dataset_version": version, "epochs": cfg.epochs}

    def _run_training(self, samples: list, version: int, cfg: TrainConfig,
                      cold_start: bool) -> None:
        try:
            deployment = self._deployment
            model = build_model(deployment.cfg, seed=cfg.seed)
            if not cold_start:  # warm start: continue from the serving weights
                for target, source in zip(model_params(model), model_params(deployment.model)):
                    target.data = source.data.copy()
            records = []
            for i, (image_path, mask_path) in enumerate(samples):
                records.append(SampleRecord(
                    id=f"enrolled-{i:04d}",
                    image=load_image(os.path.join(self.root, image_path)),
                    mask=load_mask(os.path.join(self.root, mask_path)),
                    source="enrolled",
                ))

            def on_epoch(stats):
                with self._lock:
                    self._training.progress = (stats.epoch + 1) / cfg.epochs
                    self._training.epochs_done = stats.epoch + 1

            train(model, records, cfg, on_epoch=on_epoch)
            path = self._checkpoint_path("parallel")
            digest = save_checkpoint(model, os.path.join(self.root, path))
            with self._lock:
                self._parallel = (model, digest, path)
                self._training = TrainingStatus(state="completed", progress=1.0,
                                                digest=digest, dataset_version=version)
                self._append_event({"type": "training_completed", "digest": digest,
                                    "checkpoint": path, "dataset_version": version})
        except Exception as e:  # surfaced via /parallel/status, never crashes serving
            log.exception("parallel training failed")
            with self._lock:
                self._training = TrainingStatus(state="failed", error=str(e))
                self._append_event({"type": "training_failed", "error": str(e)})

    def training_status(self) -> dict:
        with self._lock:
            return self._training.as_dict()

    def swap_weights(self) -> dict:
        with self._lock:
            if self._training.state != "completed":
                raise ConflictError(
                    f"no completed parallel run to deploy (state: {self._training.state})"
                )
            model, digest, path = self._parallel
            if model is None:  # completed in a previous process; weights live on disk
                model = load_checkpoint(os.path.join(self.root, path))
            previous = self._deployment.digest
            self._deployment = Deployment(digest, path, model, model.cfg)
            self._append_event({"type": "deploy", "digest": digest, "checkpoint": path,
                                "reason": "swap"})
            self._training = TrainingStatus()
            self._parallel = None
        return {"digest": digest, "previous": previous}

    # -- observability -------------------------------------------------------

    def model_info(self) -> dict:
        deployment = self._deployment
        return {
            "digest": deployment.digest,
            "config": config_to_dict(deployment.cfg),
            "params": count_params(deployment.model),
            "flops": count_flops(deployment.model),
        }

    def dataset_stats(self) -> dict:
        with self._lock:
            return {"version": self._version, "size": len(self._dataset)}

    def close(self) -> None:
        thread = self._thread
        if thread is not None and thread.is_alive():
            thread.join(timeout=60)
        self._events.close()


# -- HTTP layer --------------------------------------------------------------


def create_app(service: Service):
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="coalseg loop service")

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.http_status, content={"detail": str(exc)})

    @app.post("/v1/terminals/{terminal_id}/images")
    def ingest(terminal_id: str, body: dict):
        if "image" not in body:
            raise RequestError("body must carry a base64 'image'")
        return service.ingest_image(terminal_id, body["image"])

    @app.get("/v1/predictions")
    def predictions(status: str = PENDING):
        return service.list_predictions(status)

    @app.post("/v1/predictions/{prediction_id}/verdict")
    def verdict(prediction_id: str, body: dict):
        if "decision" not in body:
            raise RequestError("body must carry a 'decision'")
        return service.submit_verdict(
            prediction_id, body["decision"],
            corrected_mask=body.get("corrected_mask"),
            reviewer=body.get("reviewer", "expert"),
        )

    @app.post("/v1/parallel/train", status_code=202)
    def start_training(body: Optional[dict] = None):
        return service.start_training(body)

    @app.get("/v1/parallel/status")
    def training_status():
        return service.training_status()

    @app.post("/v1/weights/swap")
    def swap():
        return service.swap_weights()

    @app.get("/v1/model/info")
    def model_info():
        return service.model_info()

    @app.get("/v1/dataset/stats")
    def dataset_stats():
        return service.dataset_stats()

    @app.get("/v1/palette")
    def palette():
        return palette_json()

    return app
