"""Single-file checkpoints for blocks, merged models and fused models.

Byte layout (little-endian)::

    b"MMLGCKPT"                 magic, 8 bytes
    u16  version                currently 1
    u32  manifest_len
    32B  sha256(manifest bytes)
    manifest                    UTF-8 JSON
    payload                     concatenated row-major f64 tensors

The manifest lists every tensor as ``{name, shape, offset, nbytes, sha256}``
with offsets relative to the start of the payload, plus the model metadata
needed to rebuild it.  Writes go to a temporary file that is renamed into
place, so readers never see a half-written checkpoint.
"""

import hashlib
import json
import os
import struct
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ChecksumMismatch, ConfigError, MalformedFile, ManifestInconsistent,
                     VersionUnsupported)
from .legoblock import block_from_dicts
from .legofuse import FusedModel
from .legomerge import MergedModel, SlerpSpec

MAGIC = b"MMLGCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sHI32s")


def _sha(b):
    return hashlib.sha256(b).hexdigest()


def _block_meta(block):
    return {"modality": block.modality, "encoder": block.encoder_config.to_dict(),
            "config": block.config.to_dict(), "task": block.task.to_dict(),
            "seed": block.seed, "init_seed": block.init_seed}


def _block_manifest(block, prefix=""):
    meta = _block_meta(block)
    tensors = {prefix + k: v for k, v in block.state_arrays().items()}
    return meta, tensors


def model_tensors(model):
    """``(metadata, {name: array})`` describing ``model``."""
    if model.kind == "block":
        meta, tensors = _block_manifest(model)
        return {"kind": "block", "block": meta}, tensors
    tensors, blocks = {}, []
    for i, b in enumerate(model.blocks):
        meta, t = _block_manifest(b, f"block{i}.")
        blocks.append(meta)
        tensors.update(t)
    meta = {"kind": model.kind, "blocks": blocks, "modalities": model.modalities,
            "phase_mode": model.phase_mode}
    for k, v in model.head_arrays().items():
        tensors[f"head.{k}"] = v
    if model.kind == "merged":
        meta.update(alpha=model.slerp_spec.alpha, eps=model.slerp_spec.eps,
                    include_norm=model.include_norm, head_merge_order=model.modalities)
    elif model.kind == "fused":
        tensors["fused.latent_init"] = model.latent_init.data
        meta.update(fuse_method=model.fuse_method, latent_init_mode=model.latent_init_mode,
                    schedule=[[model.modalities[b], p] for b, p in model.schedule])
    else:
        raise ConfigError(f"cannot checkpoint a model of kind {model.kind!r}")
    return meta, tensors


def save(model, path, extra=None):
    """Write ``model`` to ``path`` atomically; returns the manifest."""
    meta, tensors = model_tensors(model)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": _sha(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "mmlego-checkpoint", "model": meta, "tensors": entries,
                "payload_nbytes": offset,
                "created": {"unix_time": time.time(), "package_version": __version__},
                "extra": extra or {}}
    if meta["kind"] == "block":
        manifest["latent_shape"] = meta["block"]["config"]["latent_shape"]
    else:
        manifest["latent_shape"] = meta["blocks"][0]["config"]["latent_shape"]
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, len(mbytes), hashlib.sha256(mbytes).digest())
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(mbytes)
            for c in chunks:
                fh.write(c)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return manifest


def _read_header(buf):
    if len(buf) < _HEADER.size:
        raise MalformedFile("file too short for a checkpoint header", len(buf))
    magic, version, mlen, digest = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedFile("not a checkpoint (bad magic)", 0)
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} is not supported "
                                 f"(this build reads version {VERSION})")
    start = _HEADER.size
    if start + mlen > len(buf):
        raise MalformedFile(f"manifest of {mlen} bytes runs past end of file", start)
    mbytes = buf[start:start + mlen]
    if hashlib.sha256(mbytes).digest() != digest:
        raise ChecksumMismatch("manifest checksum mismatch", tensor="<manifest>")
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"manifest is not valid JSON: {exc}", start) from None
    return manifest, start + mlen


def read_manifest(path):
    """Manifest only; the tensor payload is not verified."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise MalformedFile("file too short for a checkpoint header", len(head))
        mlen = _HEADER.unpack_from(head, 0)[2]
        return _read_header(head + fh.read(mlen))[0]


def read_tensors(path):
    """``(manifest, {name: array})`` with every checksum verified."""
    buf = Path(path).read_bytes()
    manifest, start = _read_header(buf)
    payload = memoryview(buf)[start:]
    if len(payload) != manifest.get("payload_nbytes"):
        raise ManifestInconsistent(f"payload has {len(payload)} bytes, manifest declares "
                                   f"{manifest.get('payload_nbytes')}")
    tensors, end = {}, 0
    for e in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["nbytes"] != n or e["offset"] != end:
            raise ManifestInconsistent(f"tensor {e['name']!r}: entry does not tile the payload")
        raw = payload[e["offset"]:e["offset"] + n]
        if _sha(raw) != e["sha256"]:
            raise ChecksumMismatch(f"checksum mismatch in tensor {e['name']!r}", tensor=e["name"])
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        end += n
    if end != len(payload):
        raise ManifestInconsistent("payload has bytes not covered by any tensor")
    lat = manifest.get("latent_shape")
    for name, arr in tensors.items():
        if name.endswith("latent_init") and list(arr.shape) != lat:
            raise ManifestInconsistent(f"{name} has shape {list(arr.shape)}, manifest says {lat}")
    return manifest, tensors


def _build_block(meta, tensors, prefix=""):
    block = block_from_dicts(meta["modality"], meta["encoder"], meta["config"], meta["task"],
                             meta["seed"], meta["init_seed"])
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    expected = set(block.state_arrays())
    if set(own) != expected:
        missing, surplus = expected - set(own), set(own) - expected
        raise ManifestInconsistent(f"block {meta['modality']!r}: missing {sorted(missing)}, "
                                   f"unexpected {sorted(surplus)}")
    block.load_state_arrays(own)
    return block


def load(path):
    """Rebuild the model stored at ``path``."""
    manifest, tensors = read_tensors(path)
    meta = manifest["model"]
    kind = meta.get("kind")
    if kind == "block":
        return _build_block(meta["block"], tensors)
    if kind not in ("merged", "fused"):
        raise ManifestInconsistent(f"unknown model kind {kind!r}")
    blocks = [_build_block(m, tensors, f"block{i}.") for i, m in enumerate(meta["blocks"])]
    head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
    if kind == "merged":
        return MergedModel(blocks, head, meta["phase_mode"],
                           SlerpSpec(meta["alpha"], meta["eps"]), meta["include_norm"])
    model = FusedModel(blocks, meta["fuse_method"], tensors["fused.latent_init"], head,
                       meta["latent_init_mode"], meta["phase_mode"])
    stored = [[model.modalities[b], p] for b, p in model.schedule]
    if stored != meta["schedule"]:
        raise ManifestInconsistent("stored fuse schedule does not match the rebuilt one")
    return model


def _block_summaries(manifest):
    m = manifest["model"]
    return [m["block"]] if m["kind"] == "block" else m["blocks"]


def _head_dims(meta):
    c, d = meta["config"]["latent_shape"]
    task = meta["task"]
    n_out = task["n_bins"] if task["kind"] == "survival" else task["n_classes"]
    return c * d * (2 if meta["config"]["head_imag"] else 1), n_out


def compatibility_report(a, b):
    """Pass/fail per merge constraint, from two manifests (or checkpoint paths).

    Depth and encoder are free to differ: merging acts on final latents.
    """
    ma = read_manifest(a) if isinstance(a, (str, Path)) else a
    mb = read_manifest(b) if isinstance(b, (str, Path)) else b
    ba, bb = _block_summaries(ma)[0], _block_summaries(mb)[0]
    checks = {
        "latent_shape": ba["config"]["latent_shape"] == bb["config"]["latent_shape"],
        "task_spec": ba["task"] == bb["task"],
        "head_dims": _head_dims(ba) == _head_dims(bb),
    }
    return {"checks": checks, "compatible": all(checks.values()),
            "depths": [ba["config"]["depth"], bb["config"]["depth"]]}
