"""HTTP service exposing volumes, windowed slice rendering, asynchronous
semantic-search and saliency jobs, and the static explorer UI."""

from __future__ import annotations

import io
import json
import re
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from . import encoder as enc
from . import semantics
from .volume import Volume, VolumeError, WindowSpec, load_volume


class ServiceError(ValueError):
    """Bad request payloads or missing resources."""


def render_slice(volume: Volume, axis: str, index: int,
                 window_spec: WindowSpec) -> np.ndarray:
    """Windowed 2D slice as uint8 grayscale (round-half-up quantization)."""
    axis_num = {"z": 0, "y": 1, "x": 2}.get(axis)
    if axis_num is None:
        raise ServiceError(f"axis must be one of z/y/x, got {axis!r}")
    if not 0 <= index < volume.shape[axis_num]:
        raise ServiceError(
            f"index {index} out of range for axis {axis} "
            f"(size {volume.shape[axis_num]})"
        )
    sl = [slice(None)] * 3
    sl[axis_num] = index
    plane = volume.data[tuple(sl)]
    lo = window_spec.level - window_spec.width / 2.0
    windowed = np.clip((plane.astype(np.float64) - lo) / window_spec.width,
                       0.0, 1.0)
    return np.floor(windowed * 255.0 + 0.5).astype(np.uint8)


def _png_bytes(gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class SearchJob:
    job_id: str
    kind: str                      # "search" | "saliency"
    status: str = "pending"        # pending -> running -> done | failed
    results: list = field(default_factory=list)
    heatmaps: dict = field(default_factory=dict)  # target_id -> Volume
    error: str = ""


class JobRegistry:
    """Monotone job state machine behind a lock + bounded worker pool."""

    def __init__(self, workers: int = 2):
        self._jobs = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers)

    def submit(self, kind: str, fn) -> str:
        job = SearchJob(job_id=uuid.uuid4().hex[:12], kind=kind)
        with self._lock:
            self._jobs[job.job_id] = job
        self._pool.submit(self._run, job.job_id, fn)
        return job.job_id

    def _run(self, job_id, fn):
        with self._lock:
            self._jobs[job_id].status = "running"
        try:
            results, heatmaps = fn()
        except Exception as exc:  # job failures surface via polling
            with self._lock:
                job = self._jobs[job_id]
                job.status = "failed"
                job.error = str(exc)
            return
        with self._lock:
            job = self._jobs[job_id]
            job.results = results
            job.heatmaps = heatmaps
            job.status = "done"

    def get(self, job_id):
        with self._lock:
            return self._jobs.get(job_id)

    def shutdown(self):
        self._pool.shutdown(wait=False)


class VolumeLibrary:
    """Lazy id -> Volume map over a directory of sidecar/raw pairs."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._cache = {}
        self._lock = threading.Lock()

    def ids(self):
        out = []
        for sidecar in sorted(self.directory.glob("*.json")):
            try:
                meta = json.loads(sidecar.read_text())
            except json.JSONDecodeError:
                continue
            if meta.get("kind") == "hu":
                out.append(sidecar.stem)
        return out

    def describe(self):
        entries = []
        for vid in self.ids():
            meta = json.loads((self.directory / f"{vid}.json").read_text())
            entries.append({"id": vid, "shape": meta["shape"],
                            "spacing_mm": meta["spacing_mm"]})
        return entries

    def get(self, vid) -> Volume:
        with self._lock:
            if vid not in self._cache:
                path = self.directory / f"{vid}.json"
                if not path.exists() or vid not in self.ids():
                    raise KeyError(vid)
                self._cache[vid] = load_volume(path)
            return self._cache[vid]


def _parse_triple(value, name):
    try:
        t = tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ServiceError(f"{name} must be 3 integers") from exc
    if len(t) != 3:
        raise ServiceError(f"{name} must have 3 components")
    return t


class ExplorerService:
    """Owns the immutable volumes/encoder plus the mutable job registry."""

    def __init__(self, volume_dir, checkpoint_path, ui_dir=None, workers=2):
        self.library = VolumeLibrary(volume_dir)
        ckpt = Path(checkpoint_path)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
        self.encoder_state, self.epoch = enc.load_checkpoint(ckpt)
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.jobs = JobRegistry(workers=workers)

    def start_search(self, payload) -> str:
        for key in ("source_id", "center", "box", "target_ids"):
            if key not in payload:
                raise ServiceError(f"search request lacks {key!r}")
        source = self._volume_or_400(payload["source_id"])
        center = _parse_triple(payload["center"], "center")
        box = _parse_triple(payload["box"], "box")
        stride = _parse_triple(payload.get("stride", box), "stride")
        target_ids = list(payload["target_ids"])
        if not target_ids:
            raise ServiceError("target_ids must be nonempty")
        targets = [(tid, self._volume_or_400(tid)) for tid in target_ids]

        def run():
            results = semantics.semantic_search(
                self.encoder_state, source, center, box, targets, stride)
            summary = [{
                "target_id": r.target_scan_id,
                "best_position": list(r.best_position),
                "best_similarity": r.best_similarity,
            } for r in results]
            heatmaps = {
                r.target_scan_id: semantics.heatmap_to_volume(
                    r, self.library.get(r.target_scan_id))
                for r in results
            }
            return summary, heatmaps

        return self.jobs.submit("search", run)

    def start_saliency(self, vid, occ: int, stride: int) -> str:
        volume = self._volume_or_400(vid)

        def run():
            sal = semantics.ofd_saliency(self.encoder_state, volume,
                                         (occ,) * 3, (stride,) * 3)
            painted = semantics.saliency_to_volume(sal, volume)
            summary = [{
                "target_id": vid,
                "max_distance": float(sal.grid.max()) if sal.grid.size else 0.0,
            }]
            return summary, {vid: painted}

        return self.jobs.submit("saliency", run)

    def _volume_or_400(self, vid):
        try:
            return self.library.get(vid)
        except KeyError as exc:
            raise ServiceError(f"unknown volume {vid!r}") from exc

    def shutdown(self):
        self.jobs.shutdown()


_ROUTE_SLICE = re.compile(r"^/api/volumes/([^/]+)/slice$")
_ROUTE_JOB = re.compile(r"^/api/search/([0-9a-f]+)$")
_ROUTE_HEATMAP = re.compile(r"^/api/search/([0-9a-f]+)/heatmap/([^/]+)$")
_ROUTE_SALIENCY = re.compile(r"^/api/saliency/([^/]+)$")

_FALLBACK_PAGE = (b"<!doctype html><title>voxelfm</title>"
                  b"<p>voxelfm service is running; no UI assets installed. "
                  b"See /api/volumes.</p>")

_CONTENT_TYPES = {".html": "text/html", ".js": "text/javascript",
                  ".css": "text/css", ".map": "application/json",
                  ".png": "image/png", ".svg": "image/svg+xml",
                  ".ico": "image/x-icon"}


class _Handler(BaseHTTPRequestHandler):
    service: ExplorerService = None  # injected by make_server

    def log_message(self, *args):  # quiet by default
        pass

    def _send(self, code, body, content_type="application/json"):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code, obj):
        self._send(code, json.dumps(obj).encode("utf-8"))

    def _error(self, code, message):
        self._json(code, {"error": message})

    def do_OPTIONS(self):
        self._send(204, b"")

    def do_GET(self):
        try:
            self._route_get()
        except ServiceError as exc:
            self._error(400, str(exc))
        except BrokenPipeError:
            pass
        except Exception as exc:
            self._error(500, f"{type(exc).__name__}: {exc}")

    def do_POST(self):
        try:
            self._route_post()
        except ServiceError as exc:
            self._error(400, str(exc))
        except Exception as exc:
            self._error(500, f"{type(exc).__name__}: {exc}")

    # -- GET routing

    def _route_get(self):
        svc = self.service
        parsed = urlparse(self.path)
        path = parsed.path
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}

        if path == "/api/volumes":
            self._json(200, svc.library.describe())
            return

        m = _ROUTE_SLICE.match(path)
        if m:
            self._slice_endpoint(m.group(1), query)
            return

        m = _ROUTE_HEATMAP.match(path)
        if m:
            self._heatmap_endpoint(m.group(1), m.group(2), query)
            return

        m = _ROUTE_JOB.match(path)
        if m:
            job = svc.jobs.get(m.group(1))
            if job is None:
                self._error(404, f"unknown job {m.group(1)!r}")
                return
            self._json(200, {"status": job.status, "results": job.results,
                             "error": job.error})
            return

        m = _ROUTE_SALIENCY.match(path)
        if m:
            occ = int(query.get("occ", 8))
            stride = int(query.get("stride", occ))
            job_id = svc.start_saliency(m.group(1), occ, stride)
            self._json(200, {"job_id": job_id})
            return

        if path.startswith("/api/"):
            self._error(404, f"unknown endpoint {path}")
            return
        self._static(path)

    def _slice_endpoint(self, vid, query):
        svc = self.service
        try:
            volume = svc.library.get(vid)
        except KeyError:
            self._error(404, f"unknown volume {vid!r}")
            return
        axis = query.get("axis", "z")
        index = int(query.get("index", 0))
        preset = query.get("preset", "")
        if preset:
            try:
                spec = WindowSpec.preset(preset)
            except VolumeError as exc:
                raise ServiceError(str(exc)) from exc
        else:
            level = float(query.get("level", 40.0))
            width = float(query.get("width", 400.0))
            spec = WindowSpec(level, width)
        gray = render_slice(volume, axis, index, spec)
        self._send(200, _png_bytes(gray), "image/png")

    def _heatmap_endpoint(self, job_id, target_id, query):
        job = self.service.jobs.get(job_id)
        if job is None:
            self._error(404, f"unknown job {job_id!r}")
            return
        if job.status != "done":
            self._error(400, f"job is {job.status}, heatmap not ready")
            return
        if target_id not in job.heatmaps:
            self._error(404, f"no heatmap for target {target_id!r}")
            return
        heat = job.heatmaps[target_id]
        axis = query.get("axis", "z")
        index = int(query.get("index", 0))
        axis_num = {"z": 0, "y": 1, "x": 2}.get(axis)
        if axis_num is None or not 0 <= index < heat.shape[axis_num]:
            raise ServiceError(f"bad axis/index {axis}/{index}")
        sl = [slice(None)] * 3
        sl[axis_num] = index
        plane = heat.data[tuple(sl)].astype(np.float64)
        gray = np.floor(np.clip((plane + 1.0) / 2.0, 0, 1) * 255.0 + 0.5)
        self._send(200, _png_bytes(gray.astype(np.uint8)), "image/png")

    def _static(self, path):
        ui = self.service.ui_dir
        if path in ("", "/"):
            path = "/index.html"
        if ui is not None and ui.is_dir():
            target = (ui / path.lstrip("/")).resolve()
            if str(target).startswith(str(ui.resolve())) and target.is_file():
                ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
                self._send(200, target.read_bytes(), ctype)
                return
        if path == "/index.html":
            self._send(200, _FALLBACK_PAGE, "text/html")
            return
        self._error(404, f"no such asset {path}")

    # -- POST routing

    def _route_post(self):
        if urlparse(self.path).path != "/api/search":
            self._error(404, f"unknown endpoint {self.path}")
            return
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            payload = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ServiceError(f"request body is not valid JSON: {exc}") from exc
        job_id = self.service.start_search(payload)
        self._json(200, {"job_id": job_id})


def make_server(volume_dir, checkpoint_path, host="127.0.0.1", port=8420,
                ui_dir=None, workers=2):
    """Build (but do not run) the HTTP server; caller owns serve_forever."""
    service = ExplorerService(volume_dir, checkpoint_path, ui_dir=ui_dir,
                              workers=workers)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.voxelfm_service = service
    return server


def serve(volume_dir, checkpoint_path, host="127.0.0.1", port=8420,
          ui_dir=None):
    """Run the explorer service until interrupted."""
    server = make_server(volume_dir, checkpoint_path, host, port, ui_dir)
    addr = server.server_address
    print(f"voxelfm service listening on http://{addr[0]}:{addr[1]}/",
          flush=True)
    try:
        server.serve_forever()
    finally:
        server.voxelfm_service.shutdown()
        server.server_close()
