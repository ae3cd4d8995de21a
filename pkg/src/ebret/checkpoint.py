"""Versioned binary checkpoints for all four model families.

Layout: one UTF-8 JSON header line (sorted keys), then each tensor's raw
bytes in header order, row-major little-endian float64. The header records
the model kind, dimensions, tensor shapes, and for residual energies the
reference checkpoint's content hash. A JSON dump of any checkpoint is
available for inspection.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .encoder import PooledParams
from .energy import NONRESIDUAL, RESIDUAL
from .errors import DataError
from .generation import GenParams

FORMAT_VERSION = 1

KIND_PROPOSAL = "proposal"
KIND_ENERGY = "energy"
KIND_GEN = "gen"
KIND_INF = "inf"


def _write(path: str, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in tensors
    ]
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version in {path}")
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise DataError(f"truncated checkpoint {path}")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, tensors


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def checkpoint_json(path: str) -> dict:
    """Checkpoint contents as plain JSON-ready structures."""
    header, tensors = _read(path)
    return {
        "header": header,
        "tensors": {name: arr.tolist() for name, arr in tensors.items()},
    }


def _pooled_tensors(params: PooledParams) -> list[tuple[str, np.ndarray]]:
    return [
        ("emb", params.emb),
        ("w1", params.w1),
        ("b1", params.b1),
        ("w2", params.w2),
        ("b2", np.array([params.b2])),
    ]


def _pooled_from(tensors: dict[str, np.ndarray]) -> PooledParams:
    return PooledParams(
        tensors["emb"], tensors["w1"], tensors["b1"], tensors["w2"],
        float(tensors["b2"][0]),
    )


def _pooled_header(kind: str, params: PooledParams) -> dict:
    return {
        "kind": kind,
        "d_emb": params.d_emb,
        "hidden": params.hidden,
        "vocab_size": params.vocab_size,
    }


def save_proposal(path: str, params: PooledParams) -> None:
    _write(path, _pooled_header(KIND_PROPOSAL, params), _pooled_tensors(params))


def load_proposal(path: str) -> PooledParams:
    header, tensors = _read(path)
    if header["kind"] != KIND_PROPOSAL:
        raise DataError(f"{path} is a {header['kind']!r} checkpoint")
    return _pooled_from(tensors)


def save_inf(path: str, params: PooledParams) -> None:
    _write(path, _pooled_header(KIND_INF, params), _pooled_tensors(params))


def load_inf(path: str) -> PooledParams:
    header, tensors = _read(path)
    if header["kind"] != KIND_INF:
        raise DataError(f"{path} is a {header['kind']!r} checkpoint")
    return _pooled_from(tensors)


def save_energy(path: str, params: PooledParams, mode_kind: str,
                reference_sha256: str | None = None) -> None:
    if mode_kind not in (NONRESIDUAL, RESIDUAL):
        raise DataError(f"unknown energy mode {mode_kind!r}")
    if mode_kind == RESIDUAL and reference_sha256 is None:
        raise DataError("residual energy checkpoint needs the reference hash")
    header = _pooled_header(KIND_ENERGY, params)
    header["mode"] = mode_kind
    header["reference_sha256"] = reference_sha256
    _write(path, header, _pooled_tensors(params))


def load_energy(path: str) -> tuple[PooledParams, str, str | None]:
    """Returns (params, mode kind, reference hash or None)."""
    header, tensors = _read(path)
    if header["kind"] != KIND_ENERGY:
        raise DataError(f"{path} is a {header['kind']!r} checkpoint")
    return _pooled_from(tensors), header["mode"], header.get("reference_sha256")


def save_gen(path: str, params: GenParams) -> None:
    header = {
        "kind": KIND_GEN,
        "d_emb": params.d_emb,
        "hidden": params.hidden,
        "vocab_size": params.vocab_size,
    }
    _write(path, header, [
        ("emb", params.emb),
        ("cproj", params.cproj),
        ("pproj", params.pproj),
        ("out", params.out),
        ("bias", params.bias),
    ])


def load_gen(path: str) -> GenParams:
    header, tensors = _read(path)
    if header["kind"] != KIND_GEN:
        raise DataError(f"{path} is a {header['kind']!r} checkpoint")
    return GenParams(tensors["emb"], tensors["cproj"], tensors["pproj"],
                     tensors["out"], tensors["bias"])
