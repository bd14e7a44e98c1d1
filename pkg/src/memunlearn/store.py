"""Content-addressed checkpoint store.

Layout::

    <store>/blobs/<blob-digest>.safetensors   parameter tensors
    <store>/manifests/<ckpt-id>.json          model spec, lineage, config, parent

Both names are derived from content, so writes are idempotent.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from safetensors.torch import load_file, save_file

from .backend import BackendError, Checkpoint, ModelSpec, _tensor_digest, build_model


class StoreError(Exception):
    pass


class CheckpointNotFound(StoreError):
    pass


class IntegrityError(StoreError):
    pass


class ShapeMismatch(StoreError):
    pass


def _atomic_write(path: Path, write):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    write(tmp)
    os.replace(tmp, path)


class CheckpointStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        (self.root / "manifests").mkdir(parents=True, exist_ok=True)

    def _blob(self, digest: str) -> Path:
        return self.root / "blobs" / f"{digest}.safetensors"

    def _manifest(self, ckpt_id: str) -> Path:
        return self.root / "manifests" / f"{ckpt_id}.json"

    def save(self, ckpt: Checkpoint) -> str:
        blob = self._blob(ckpt.blob_digest)
        if not blob.exists():
            state = {k: v.contiguous() for k, v in ckpt.state.items()}
            _atomic_write(blob, lambda p: save_file(state, str(p)))
        manifest = self._manifest(ckpt.ckpt_id)
        if not manifest.exists():
            text = json.dumps({"id": ckpt.ckpt_id, **ckpt.manifest()}, indent=2, sort_keys=True, default=str)
            _atomic_write(manifest, lambda p: p.write_text(text + "\n"))
        return ckpt.ckpt_id

    def __contains__(self, ckpt_id: str) -> bool:
        return self._manifest(ckpt_id).exists()

    def read_manifest(self, ckpt_id: str) -> dict:
        path = self._manifest(ckpt_id)
        if not path.exists():
            raise CheckpointNotFound(ckpt_id)
        try:
            record = json.loads(path.read_text())
            record["blob"], record["model_spec"], record["lineage"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IntegrityError(f"manifest {path.name} is corrupt: {exc}") from None
        return record

    def load(self, ckpt_id: str, spec: ModelSpec | None = None) -> Checkpoint:
        """Load a checkpoint; with ``spec`` given, its shapes are checked against it."""
        record = self.read_manifest(ckpt_id)
        blob = self._blob(record["blob"])
        if not blob.exists():
            raise IntegrityError(f"manifest {ckpt_id}.json points to missing blob {record['blob']}")
        try:
            state = load_file(str(blob))
        except Exception as exc:  # safetensors raises its own error types
            raise IntegrityError(f"blob for {ckpt_id} is unreadable: {exc}") from None
        if _tensor_digest(state) != record["blob"]:
            raise IntegrityError(f"blob for {ckpt_id} does not match its digest")
        stored_spec = ModelSpec.from_dict(record["model_spec"])
        if spec is not None:
            _check_shapes(state, spec, ckpt_id)
        # safetensors sorts names; restore module order so flat() is stable
        if stored_spec.differentiable:
            _check_shapes(state, stored_spec, ckpt_id)
            state = {k: state[k] for k in build_model(stored_spec).state_dict()}
        else:
            state = {k: state[k] for k in ("x", "y")}
        ckpt = Checkpoint(state, stored_spec, record["lineage"], record.get("train_config"),
                          record.get("parent"), record.get("meta") or {})
        if ckpt.ckpt_id != ckpt_id:
            raise IntegrityError(f"manifest {ckpt_id}.json does not hash to its own id")
        return ckpt

    def list(self) -> list[dict]:
        out = []
        for path in sorted((self.root / "manifests").glob("*.json")):
            out.append(self.read_manifest(path.stem))
        return out

    def verify(self) -> list[str]:
        """Return the ids of every manifest that fails to load cleanly."""
        bad = []
        for path in sorted((self.root / "manifests").glob("*.json")):
            try:
                self.load(path.stem)
            except StoreError:
                bad.append(path.stem)
        return bad


def _check_shapes(state, spec: ModelSpec, ckpt_id: str):
    if not spec.differentiable:
        return
    try:
        expected = {k: tuple(v.shape) for k, v in build_model(spec).state_dict().items()}
    except BackendError as exc:
        raise ShapeMismatch(str(exc)) from None
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        diff = sorted(set(expected.items()) ^ set(got.items()))[:3]
        raise ShapeMismatch(f"checkpoint {ckpt_id} does not match the requested spec: {diff}")
