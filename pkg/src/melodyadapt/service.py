"""Interactive annotation service: one adaptation session per 5-second
chunk, driven over HTTP+JSON.

The protocol mirrors the test-time adaptation loop exactly (the service
calls the same selection and inner-loop code): suggest the least-confident
frames, collect annotations for them, adapt, repeat. Sessions persist as
an append-only journal plus a weight snapshot per adapt, so a restarted
server serves identical predictions.

Endpoints (all pitch values in Hz, 0 meaning unvoiced):
  POST /sessions                     WAV bytes or {"episode_id": ...}
  GET  /sessions/{id}
  GET  /sessions/{id}/suggestions?k=
  POST /sessions/{id}/annotations    {"annotations": [{"frame", "hz"|"pitch_class"}]}
  POST /sessions/{id}/adapt
  GET  /sessions/{id}/export
  GET  /sessions/{id}/audio?frame=&half_seconds=
The full field-level schema ships in docs/api-schema.json.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import Response
from scipy.io import wavfile

from . import adaptation as ad
from . import datasets, nn
from . import signal as sig
from .adaptation import MetaHyperparameters
from .metrics import classes_to_track, evaluate
from .model import load_models

SPECTROGRAM_IMAGE_BINS = 128


@dataclass
class Session:
    session_id: str
    state: ad.AdaptationState
    samples: np.ndarray
    chunk_index: int
    linked: list[str]
    suggested: set = field(default_factory=set)  # cumulative
    pending: list = field(default_factory=list)  # suggested, not yet adapted on
    lock: threading.Lock = field(default_factory=threading.Lock)
    annotations_since_adapt: int = 0


def _spectrogram_image(mags: np.ndarray) -> dict:
    bins, frames = mags.shape
    group = max(1, bins // SPECTROGRAM_IMAGE_BINS)
    usable = (bins // group) * group
    pooled = mags[:usable].reshape(-1, group, frames).max(axis=1)
    db = 20.0 * np.log10(pooled + 1e-6)
    lo, hi = float(db.min()), float(db.max())
    span = hi - lo if hi > lo else 1.0
    img = np.clip((db - lo) / span * 255.0, 0, 255).astype(np.uint8)
    return {
        "bins": int(img.shape[0]),
        "frames": int(frames),
        "db_min": lo,
        "db_max": hi,
        "rows": img.tolist(),
    }


class AnnotationService:
    """Owns the models, the session store, and the persistence layout."""

    def __init__(self, weights_path, sessions_dir, manifest_path=None,
                 hyper: MetaHyperparameters | None = None, meta_weighting: bool = True):
        self.base, self.conf = load_models(weights_path)
        if self.conf is None:
            raise ValueError(f"{weights_path}: the service needs a confidence head")
        self.hyper = hyper or MetaHyperparameters()
        self.meta_weighting = meta_weighting
        self.sessions_dir = Path(sessions_dir)
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.episodes_by_id: dict[str, tuple[datasets.Episode, np.ndarray]] = {}
        if manifest_path is not None:
            manifest = datasets.load_manifest(manifest_path)
            for entry in manifest.entries:
                clip = sig.load_audio(entry.audio)
                track = sig.read_pitch_track(entry.labels)
                for i, ch in enumerate(sig.chunk(clip)):
                    episode = datasets.episodes_from_clip(
                        sig.AudioClip(samples=ch.samples), None, Path(entry.audio).stem
                    )[0]
                    episode.id = f"{Path(entry.audio).stem}#{i}"
                    start = i * sig.FRAMES_PER_CHUNK
                    episode.labels = sig.quantize_labels(track[start:], sig.FRAMES_PER_CHUNK)
                    episode.valid = ch.frame_mask()
                    self.episodes_by_id[episode.id] = (episode, ch.samples)
        self._load_persisted()

    # -- session construction ------------------------------------------------

    def create_from_audio(self, wav_bytes: bytes) -> list[Session]:
        try:
            rate, data = wavfile.read(io.BytesIO(wav_bytes))
        except Exception as exc:
            raise HTTPException(status_code=400, detail=f"unreadable WAV payload: {exc}")
        tmp = io.BytesIO()
        wavfile.write(tmp, rate, data)
        tmp.seek(0)
        try:
            clip = sig.load_audio(tmp)
        except (sig.AudioLoadError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        chunks = sig.chunk(clip)
        ids = [uuid.uuid4().hex[:12] for _ in chunks]
        sessions = []
        for i, ch in enumerate(chunks):
            episode = datasets.Episode(
                id=f"upload-{ids[i]}",
                spectrogram=sig.stft_magnitude(ch),
                labels=None,
                valid=ch.frame_mask(),
            )
            sessions.append(self._new_session(ids[i], episode, ch.samples, i, ids))
        return sessions

    def create_from_episode(self, episode_id: str) -> list[Session]:
        if episode_id not in self.episodes_by_id:
            raise HTTPException(status_code=404, detail=f"unknown episode id {episode_id!r}")
        episode, samples = self.episodes_by_id[episode_id]
        copied = datasets.Episode(
            id=episode.id,
            spectrogram=episode.spectrogram,
            labels=None if episode.labels is None else episode.labels.copy(),
            valid=episode.valid.copy(),
        )
        sid = uuid.uuid4().hex[:12]
        return [self._new_session(sid, copied, samples, 0, [sid])]

    def _new_session(self, sid, episode, samples, chunk_index, linked) -> Session:
        state = ad.init_adaptation(self.base, self.conf, episode)
        session = Session(
            session_id=sid,
            state=state,
            samples=np.asarray(samples, dtype=np.float32),
            chunk_index=chunk_index,
            linked=list(linked),
        )
        self.sessions[sid] = session
        self._persist_static(session)
        self._journal(session, {"event": "created", "episode_id": episode.id})
        return session

    # -- persistence ----------------------------------------------------------

    def _dir(self, session: Session) -> Path:
        return self.sessions_dir / session.session_id

    def _persist_static(self, session: Session) -> None:
        d = self._dir(session)
        d.mkdir(parents=True, exist_ok=True)
        ep = session.state.episode
        arrays = {
            "magnitudes": ep.spectrogram.magnitudes,
            "valid": ep.valid,
            "samples": session.samples,
        }
        if ep.labels is not None:
            arrays["labels"] = ep.labels
        np.savez(d / "episode.npz", **arrays)
        (d / "meta.json").write_text(
            json.dumps(
                {
                    "session_id": session.session_id,
                    "episode_id": ep.id,
                    "chunk_index": session.chunk_index,
                    "linked": session.linked,
                }
            )
        )

    def _journal(self, session: Session, event: dict) -> None:
        event = {**event, "ts": time.time()}
        with open(self._dir(session) / "journal.jsonl", "a") as fh:
            fh.write(json.dumps(event) + "\n")

    def _snapshot_weights(self, session: Session) -> None:
        nn.save_weights(
            self._dir(session) / "weights.bin",
            {
                "classifier": (self.base.classifier_net, session.state.theta),
                "confidence": (self.conf.net, session.state.psi),
            },
            extra={"iteration": session.state.iteration},
        )

    def _load_persisted(self) -> None:
        for d in sorted(self.sessions_dir.iterdir()) if self.sessions_dir.exists() else []:
            meta_path = d / "meta.json"
            if not meta_path.exists():
                continue
            meta = json.loads(meta_path.read_text())
            data = np.load(d / "episode.npz")
            episode = datasets.Episode(
                id=meta["episode_id"],
                spectrogram=sig.Spectrogram(magnitudes=data["magnitudes"]),
                labels=data["labels"] if "labels" in data else None,
                valid=data["valid"],
            )
            state = ad.init_adaptation(self.base, self.conf, episode)
            session = Session(
                session_id=meta["session_id"],
                state=state,
                samples=data["samples"],
                chunk_index=meta["chunk_index"],
                linked=meta["linked"],
            )
            journal = d / "journal.jsonl"
            if journal.exists():
                for line in journal.read_text().splitlines():
                    event = json.loads(line)
                    if event["event"] == "suggested":
                        session.pending = [f for f in event["frames"]]
                        session.suggested.update(event["frames"])
                    elif event["event"] == "annotated":
                        for frame, cls in event["values"].items():
                            state.annotated[int(frame)] = int(cls)
                            session.annotations_since_adapt += 1
                    elif event["event"] == "adapted":
                        state.iteration = int(event["iteration"])
                        session.pending = []
                        session.annotations_since_adapt = 0
            weights = d / "weights.bin"
            if weights.exists():
                loaded, _ = nn.load_weights(weights)
                state.theta = loaded["classifier"]
                state.psi = loaded["confidence"]
            self.sessions[session.session_id] = session

    # -- views ----------------------------------------------------------------

    def get(self, sid: str) -> Session:
        if sid not in self.sessions:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        return self.sessions[sid]

    def payload(self, session: Session) -> dict:
        state = session.state
        ep = state.episode
        predictions = ad.state_predictions(self.base, state)
        confidence = ad.state_confidence(self.conf, state)
        return {
            "session_id": session.session_id,
            "episode_id": ep.id,
            "chunk_index": session.chunk_index,
            "linked_sessions": session.linked,
            "n_frames": int(ep.n_frames),
            "hop_seconds": sig.HOP_SECONDS,
            "valid": ep.valid.astype(bool).tolist(),
            "iteration": state.iteration,
            "pitch_track_hz": np.round(sig.class_to_hz(predictions), 6).tolist(),
            "confidence": np.round(confidence, 6).tolist(),
            "suggested_pending": [int(f) for f in session.pending],
            "annotated": {
                str(f): float(np.round(sig.class_to_hz(c), 6)) for f, c in sorted(state.annotated.items())
            },
            "has_labels": ep.labels is not None,
            "spectrogram": _spectrogram_image(ep.spectrogram.magnitudes),
        }

    # -- protocol steps ---------------------------------------------------------

    def suggest(self, session: Session, k: int) -> dict:
        state = session.state
        remaining = int(state.episode.valid.sum()) - len(state.annotated)
        if k <= 0:
            raise HTTPException(status_code=422, detail="k must be positive")
        if k > remaining:
            raise HTTPException(
                status_code=409,
                detail=f"only {remaining} unannotated valid frames left, cannot suggest {k}",
            )
        confidence = ad.state_confidence(self.conf, state)
        partition = ad.select_support(
            confidence, k, excluded=state.annotated_frames, valid=state.episode.valid
        )
        frames = [int(f) for f in partition.support]
        session.pending = frames
        session.suggested.update(frames)
        self._journal(session, {"event": "suggested", "frames": frames})
        predictions = ad.state_predictions(self.base, state)
        return {
            "frames": frames,
            "context": [
                {
                    "frame": f,
                    "time_seconds": round(f * sig.HOP_SECONDS, 3),
                    "predicted_hz": float(np.round(sig.class_to_hz(int(predictions[f])), 6)),
                    "confidence": float(np.round(confidence[f], 6)),
                }
                for f in frames
            ],
        }

    def annotate(self, session: Session, annotations: list[dict]) -> dict:
        state = session.state
        accepted = {}
        for item in annotations:
            if "frame" not in item:
                raise HTTPException(status_code=422, detail="annotation missing 'frame'")
            frame = int(item["frame"])
            if frame not in session.suggested:
                raise HTTPException(status_code=409, detail=f"frame {frame} was never suggested")
            if "pitch_class" in item:
                cls = int(item["pitch_class"])
                if not 0 <= cls < sig.N_CLASSES:
                    raise HTTPException(status_code=422, detail=f"pitch class {cls} out of range")
            elif "hz" in item:
                hz = float(item["hz"])
                top = sig.class_to_hz(sig.TOP_CLASS) * 2 ** (0.5 / sig.CLASSES_PER_OCTAVE)
                if hz != 0.0 and not (sig.VOICED_THRESHOLD_HZ <= hz <= top):
                    raise HTTPException(
                        status_code=422,
                        detail=f"pitch {hz} Hz outside 0 or [{sig.BASE_HZ}, {top:.1f}]",
                    )
                cls = int(sig.hz_to_class(hz))
            else:
                raise HTTPException(status_code=422, detail="annotation needs 'hz' or 'pitch_class'")
            existing = state.annotated.get(frame)
            if existing is not None and existing != cls:
                raise HTTPException(
                    status_code=409,
                    detail=f"frame {frame} already annotated as class {existing}",
                )
            accepted[frame] = cls
        new = 0
        for frame, cls in accepted.items():
            if frame not in state.annotated:
                new += 1
                session.annotations_since_adapt += 1
            state.annotated[frame] = cls
        if accepted:
            self._journal(
                session,
                {"event": "annotated", "values": {str(f): c for f, c in accepted.items()}},
            )
        return {"accepted": len(accepted), "new": new}

    def adapt(self, session: Session) -> dict:
        if not session.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="adapt already running for this session")
        try:
            state = session.state
            missing = [f for f in session.pending if f not in state.annotated]
            if missing:
                raise HTTPException(
                    status_code=409, detail=f"suggested frames not yet annotated: {missing}"
                )
            if session.annotations_since_adapt == 0:
                raise HTTPException(status_code=409, detail="no new annotations to adapt on")
            before_pred = ad.state_predictions(self.base, state)
            before_scores = self._query_scores(session)
            ad.adapt_iteration(
                self.base, self.conf, state, {}, self.hyper,
                meta_weighting=self.meta_weighting,
            )
            session.pending = []
            session.annotations_since_adapt = 0
            after_pred = ad.state_predictions(self.base, state)
            after_scores = self._query_scores(session)
            self._journal(session, {"event": "adapted", "iteration": state.iteration})
            self._snapshot_weights(session)
            changed = np.nonzero(before_pred != after_pred)[0]
            response = {
                "iteration": state.iteration,
                "pitch_track_hz": np.round(sig.class_to_hz(after_pred), 6).tolist(),
                "confidence": np.round(ad.state_confidence(self.conf, state), 6).tolist(),
                "changed_frames": [int(f) for f in changed],
            }
            if before_scores is not None:
                response["query_rpa_before"] = before_scores
                response["query_rpa_after"] = after_scores
            return response
        finally:
            session.lock.release()

    def _query_scores(self, session: Session) -> float | None:
        state = session.state
        ep = state.episode
        if ep.labels is None:
            return None
        mask = ep.valid.copy()
        annotated = state.annotated_frames
        if annotated.size:
            mask[annotated] = False
        est = classes_to_track(ad.state_predictions(self.base, state), mask=mask)
        ref = classes_to_track(ep.labels, mask=mask)
        return float(evaluate(est, ref).rpa)

    def export(self, session: Session) -> dict:
        state = session.state
        predictions = ad.state_predictions(self.base, state)
        track = sig.class_to_hz(predictions).astype(np.float64)
        for frame, cls in state.annotated.items():
            track[frame] = sig.class_to_hz(int(cls))
        label_lines = "".join(f"{v:.3f}\n" for v in track)
        report = io.StringIO()
        scores = self._query_scores(session)
        rep = ad.EpisodeReport(
            episode_id=state.episode.id,
            baseline_scores=None,
            iterations=[],
            final_predictions=predictions,
            final_confidence=ad.state_confidence(self.conf, state),
            annotated=dict(state.annotated),
        )
        config = {
            "support_size": self.hyper.support_size,
            "inner_steps": self.hyper.inner_steps,
            "inner_lr": self.hyper.inner_lr,
            "meta_weighting": self.meta_weighting,
            "iteration": state.iteration,
        }
        summary = {"dataset": "session", "method": "interactive", "k": self.hyper.support_size,
                   "s": state.iteration}
        if scores is not None:
            summary["query_rpa"] = f"{scores:.6f}"
        ad.write_adaptation_report(report, [rep], config, summary)
        return {"label_file": label_lines, "report": report.getvalue()}

    def audio_slice(self, session: Session, frame: int, half_seconds: float) -> bytes:
        if not 0 <= frame < session.state.episode.n_frames:
            raise HTTPException(status_code=422, detail=f"frame {frame} out of range")
        center = frame * sig.HOP_SAMPLES
        half = int(half_seconds * sig.SAMPLE_RATE)
        lo = max(0, center - half)
        hi = min(len(session.samples), center + half)
        buf = io.BytesIO()
        wavfile.write(buf, sig.SAMPLE_RATE, session.samples[lo:hi])
        return buf.getvalue()


def create_app(weights_path, sessions_dir, manifest_path=None,
               hyper: MetaHyperparameters | None = None, meta_weighting: bool = True) -> FastAPI:
    service = AnnotationService(
        weights_path, sessions_dir, manifest_path=manifest_path,
        hyper=hyper, meta_weighting=meta_weighting,
    )
    app = FastAPI(title="melodyadapt annotation service")
    app.state.service = service

    @app.post("/sessions")
    async def create_session(request: Request):
        content_type = request.headers.get("content-type", "")
        body = await request.body()
        if content_type.startswith("application/json"):
            try:
                data = json.loads(body)
            except json.JSONDecodeError as exc:
                raise HTTPException(status_code=422, detail=f"bad JSON: {exc}")
            if "episode_id" not in data:
                raise HTTPException(status_code=422, detail="expected an 'episode_id' field")
            sessions = service.create_from_episode(data["episode_id"])
        else:
            if not body:
                raise HTTPException(status_code=400, detail="empty request body")
            sessions = service.create_from_audio(body)
        return {"sessions": [service.payload(s) for s in sessions]}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        return service.payload(service.get(sid))

    @app.get("/sessions/{sid}/suggestions")
    def suggestions(sid: str, k: int = Query(default=None)):
        if k is None:
            k = service.hyper.support_size
        return service.suggest(service.get(sid), k)

    @app.post("/sessions/{sid}/annotations")
    async def annotations(sid: str, request: Request):
        try:
            data = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise HTTPException(status_code=422, detail=f"bad JSON: {exc}")
        if not isinstance(data, dict) or "annotations" not in data:
            raise HTTPException(status_code=422, detail="expected an 'annotations' list")
        return service.annotate(service.get(sid), data["annotations"])

    @app.post("/sessions/{sid}/adapt")
    def adapt(sid: str):
        return service.adapt(service.get(sid))

    @app.get("/sessions/{sid}/export")
    def export(sid: str):
        return service.export(service.get(sid))

    @app.get("/sessions/{sid}/audio")
    def audio(sid: str, frame: int, half_seconds: float = 0.25):
        wav = service.audio_slice(service.get(sid), frame, half_seconds)
        return Response(content=wav, media_type="audio/wav")

    return app
