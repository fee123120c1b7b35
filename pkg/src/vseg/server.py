"""HTTP service backing the review UI.

Read-only endpoints serve case metadata, base64 slices, suggestions and
confidence histograms; corrections arrive as append-only events applied
copy-on-write so slice reads always see a consistent snapshot. Export
materializes the corrected labels (native + NIfTI) plus an audit log.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES
from .ensemble import confidence_histograms, suggest_corrections, suggestions_to_json
from .volume import Volume, read_volume, write_volume

log = logging.getLogger(__name__)


class CaseState:
    """A served case: volumes in memory, suggestion queue, correction log."""

    def __init__(self, case_dir):
        self.case_dir = Path(case_dir)
        meta_path = self.case_dir / "case.json"
        if not meta_path.exists():
            raise FileNotFoundError(meta_path)
        self.meta = json.loads(meta_path.read_text())
        self.volumes = {}
        for name, rel in self.meta["files"].items():
            path = self.case_dir / rel
            if name == "truth" and not path.exists():
                continue
            self.volumes[name] = read_volume(path)
        self.dims = tuple(self.meta["dims"])
        self.k = int(self.meta["k"])
        self.threshold = float(self.meta.get("threshold", 0.6))

        self.base_labels = self.volumes["fused"].data.copy()
        self._working = self.base_labels.copy()
        self.corrections = []
        self._write_lock = threading.Lock()

        self.suggestions_doc = self._load_or_build_suggestions()
        self.histograms = self._build_histograms()

    # -- read side ---------------------------------------------------------

    @property
    def working_labels(self):
        return self._working  # atomic reference; writers swap, never mutate

    def volume_array(self, name):
        if name == "fused":
            return self.working_labels
        if name in self.volumes:
            return self.volumes[name].data
        raise KeyError(name)

    def available_volumes(self):
        names = [n for n in ("t1", "t2", "fused", "agreement", "truth") if
                 n == "fused" or n in self.volumes]
        return names

    def slice_payload(self, name, axis, index):
        arr = self.volume_array(name)
        if axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
        if not 0 <= index < arr.shape[axis]:
            raise ValueError(f"slice index {index} out of range for axis {axis}")
        sl = np.ascontiguousarray(arr.take(index, axis=axis))
        return {
            "volume": name,
            "axis": axis,
            "index": index,
            "shape": list(sl.shape),
            "dtype": sl.dtype.name,
            "data": base64.b64encode(sl.tobytes()).decode("ascii"),
            "range": [float(arr.min()), float(arr.max())],
        }

    def _load_or_build_suggestions(self):
        path = self.case_dir / "suggestions.json"
        if path.exists():
            return json.loads(path.read_text())
        log.info("suggestions.json absent; computing from agreement map")
        mask = self.volumes["mask"].data if "mask" in self.volumes else None
        suggestions = suggest_corrections(
            self.volumes["agreement"].data, self.base_labels,
            threshold=self.threshold, mask=mask)
        return suggestions_to_json(suggestions, self.meta["id"], self.k, self.threshold)

    def _build_histograms(self):
        if "truth" not in self.volumes:
            return None
        mask = self.volumes["mask"].data if "mask" in self.volumes else None
        return confidence_histograms(
            self.volumes["agreement"].data, self.base_labels,
            self.volumes["truth"].data, mask=mask, k=self.k)

    # -- write side ----------------------------------------------------------

    def apply_correction(self, voxels, label):
        if not isinstance(label, int) or not 0 <= label < len(CLASS_NAMES):
            raise ValueError(f"label must be an integer in [0, {len(CLASS_NAMES)}), got {label!r}")
        coords = np.asarray(voxels, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) == 0:
            raise ValueError("voxels must be a nonempty list of [x, y, z] triples")
        if np.any(coords < 0) or np.any(coords >= np.array(self.dims)):
            raise ValueError("correction voxel out of volume bounds")
        with self._write_lock:
            updated = self._working.copy()
            updated[tuple(coords.T)] = label
            self._working = updated
            self.corrections.append({
                "seq": len(self.corrections),
                "label": label,
                "voxels": coords.tolist(),
            })
            return {"applied": int(len(coords)), "total_corrections": len(self.corrections)}

    def export(self):
        with self._write_lock:
            labels = self._working.copy()
            events = list(self.corrections)
        spacing = self.volumes["fused"].spacing
        nii = self.case_dir / "corrected_labels.nii"
        native = self.case_dir / "corrected_labels.vjson"
        write_volume(Volume(labels, spacing=spacing), nii)
        write_volume(Volume(labels, spacing=spacing), native)
        audit_path = self.case_dir / "corrections_audit.json"
        audit_path.write_text(json.dumps({
            "volume_id": self.meta["id"],
            "num_events": len(events),
            "events": events,
        }, indent=1))
        return {"labels_nii": str(nii), "labels_native": str(native),
                "audit": str(audit_path), "num_corrections": len(events)}


CONTENT_TYPES = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
                 ".map": "application/json", ".ico": "image/x-icon"}


def make_handler(state, ui_dir=None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _send_json(self, doc, status=200):
            body = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_error_json(self, status, message):
            self._send_json({"error": message}, status=status)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if parts[:1] == ["api"]:
                    return self._get_api(parts[1:])
                return self._get_static(parts)
            except (KeyError, ValueError) as exc:
                return self._send_error_json(404, str(exc))

        def _get_api(self, parts):
            if parts == ["case"]:
                return self._send_json({
                    "id": state.meta["id"],
                    "dims": list(state.dims),
                    "spacing": state.meta["spacing"],
                    "classes": state.meta["classes"],
                    "k": state.k,
                    "threshold": state.threshold,
                    "has_truth": "truth" in state.volumes,
                    "volumes": state.available_volumes(),
                })
            if parts == ["suggestions"]:
                return self._send_json(state.suggestions_doc)
            if parts == ["histograms"]:
                if state.histograms is None:
                    return self._send_error_json(404, "case has no truth volume")
                return self._send_json(state.histograms)
            if len(parts) == 4 and parts[0] == "slice":
                _, name, axis, index = parts
                return self._send_json(state.slice_payload(name, int(axis), int(index)))
            return self._send_error_json(404, f"unknown endpoint /api/{'/'.join(parts)}")

        def _get_static(self, parts):
            if ui_dir is None:
                return self._send_error_json(404, "no ui directory configured")
            rel = "index.html" if not parts else "/".join(parts)
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                return self._send_error_json(404, f"not found: {rel}")
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type",
                             CONTENT_TYPES.get(target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8")) if raw.strip() else {}
            except json.JSONDecodeError as exc:
                return self._send_error_json(400, f"invalid JSON body: {exc}")
            try:
                if parts == ["api", "corrections"]:
                    result = state.apply_correction(body.get("voxels"), body.get("label"))
                    return self._send_json(result)
                if parts == ["api", "export"]:
                    return self._send_json(state.export())
            except ValueError as exc:
                return self._send_error_json(400, str(exc))
            return self._send_error_json(404, f"unknown endpoint {self.path}")

    return Handler


def serve_case(state, host="127.0.0.1", port=8000, ui_dir=None, ready_callback=None):
    server = ThreadingHTTPServer((host, port), make_handler(state, ui_dir))
    if ready_callback is not None:
        ready_callback(server)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
