"""Task-delta serialization and fleet memory accounting.

A task delta carries everything a task specializes over a frozen base
network: kernel modulator matrices, normalization affine parameters, and
the classifier. Convolution weights never appear in a delta; a content
fingerprint of the frozen base ties the two together.

KMD1 file layout (all integers little-endian):

    magic "KMD1" (4 bytes)
    format version, u16 (version 1: fingerprint is SHA-256)
    base fingerprint (32 bytes): hash over the concatenation of all frozen
        convolution weight bytes (float32, row-major) in layer order
    entry count, u32
    per entry:
        name length u16, UTF-8 name
        payload kind u8 (0 modulator matrix, 1 norm gamma, 2 norm beta,
                         3 classifier weight, 4 classifier bias)
        rank u8, then rank dims as u32
        payload: little-endian float32, row-major

Norm entries store the layer's eval-mode affine (scale, shift) rather than
the raw trained gamma/beta: applied onto a fresh base whose running
statistics sit at their identity defaults, that affine reproduces the
trained network's eval outputs bit-for-bit. Deltas are therefore an
inference distribution format; resuming training from an applied network
sees folded norm parameters.

Task name and config digest live on the in-memory KmDelta and in run
manifests only; the file holds exactly the fields above so any KMD1 reader
can parse it.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .net import Network, NetworkSpec, ParamGroupMask, build_network

MAGIC = b"KMD1"
VERSION = 1
FINGERPRINT_BYTES = 32

KIND_MODULATOR = 0
KIND_NORM_GAMMA = 1
KIND_NORM_BETA = 2
KIND_CLS_WEIGHT = 3
KIND_CLS_BIAS = 4

_KIND_NAMES = {0: "modulator", 1: "norm_gamma", 2: "norm_beta",
               3: "classifier_weight", 4: "classifier_bias"}


class DeltaError(Exception):
    pass


class FingerprintMismatch(DeltaError):
    pass


@dataclass
class DeltaEntry:
    name: str
    kind: int
    values: np.ndarray

    def nbytes(self) -> int:
        return 4 * self.values.size


@dataclass
class KmDelta:
    base_fingerprint: bytes
    entries: list[DeltaEntry]
    task_name: str = ""
    config_digest: str = ""

    def entry_names(self):
        return [e.name for e in self.entries]

    def payload_bytes(self) -> int:
        return sum(e.nbytes() for e in self.entries)

    def header_bytes(self) -> int:
        """Size of everything in the file that is not float payload."""
        n = 4 + 2 + FINGERPRINT_BYTES + 4
        for e in self.entries:
            n += 2 + len(e.name.encode()) + 1 + 1 + 4 * e.values.ndim
        return n

    def file_bytes(self) -> int:
        return self.header_bytes() + self.payload_bytes()


def base_fingerprint(net: Network) -> bytes:
    return hashlib.sha256(net.conv_weight_bytes()).digest()


def export_delta(net: Network, task_name: str = "",
                 config_digest: str = "") -> KmDelta:
    """Capture the trainable groups of a KM/BL-style network as a delta.

    Refuses networks whose convolution group was trainable: their task
    state lives partly in the conv weights, which deltas never carry.
    """
    if net.mask.convolution:
        raise DeltaError(
            "cannot export a delta from a network whose convolution group "
            "was trainable; the delta would be incomplete")
    entries = []
    if net.mask.explicit:
        for conv in net.conv_layers:
            if conv.modulator is None:
                continue
            for j, u in enumerate(conv.modulator.layers):
                entries.append(DeltaEntry(f"{conv.name}.modulator.layer{j}",
                                          KIND_MODULATOR, u.data.copy()))
    if net.mask.implicit:
        for name, layer in net.norm_layers:
            scale, shift = layer.eval_scale_shift()
            entries.append(DeltaEntry(f"{name}.gamma", KIND_NORM_GAMMA, scale.copy()))
            entries.append(DeltaEntry(f"{name}.beta", KIND_NORM_BETA, shift.copy()))
    if net.mask.classifier:
        entries.append(DeltaEntry("classifier.weight", KIND_CLS_WEIGHT,
                                  net.classifier.weight.data.copy()))
        entries.append(DeltaEntry("classifier.bias", KIND_CLS_BIAS,
                                  net.classifier.bias.data.copy()))
    return KmDelta(base_fingerprint=base_fingerprint(net), entries=entries,
                   task_name=task_name, config_digest=config_digest)


def write_delta(delta: KmDelta, path: str):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(delta.base_fingerprint)
        fh.write(struct.pack("<I", len(delta.entries)))
        for e in delta.entries:
            name = e.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            arr = np.ascontiguousarray(e.values, dtype="<f4")
            fh.write(struct.pack("<BB", e.kind, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_delta(path: str) -> KmDelta:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DeltaError(f"truncated delta file {path} at offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise DeltaError(f"{path} is not a KMD1 file")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise DeltaError(f"unsupported KMD1 version {version}")
    fingerprint = take(FINGERPRINT_BYTES)
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        kind, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims)
        entries.append(DeltaEntry(name, kind, values.astype(np.float32)))
    if off != len(blob):
        raise DeltaError(f"{path} has {len(blob) - off} trailing bytes")
    return KmDelta(base_fingerprint=fingerprint, entries=entries)


def _clone_network(net: Network) -> Network:
    out = build_network(net.spec, net.mask, net.init_seed)
    src = dict((n, t) for n, t, _ in net.named_parameters())
    for name, t, _ in out.named_parameters():
        t.data = src[name].data.copy()
    for (_, dst), (_, ssrc) in zip(out.norm_layers, net.norm_layers):
        dst.running_mu = ssrc.running_mu.copy()
        dst.running_sigma = ssrc.running_sigma.copy()
        dst.batches_tracked = ssrc.batches_tracked
    return out


def check_delta(base: Network, delta: KmDelta) -> dict:
    """Validate fingerprint, names, and shapes without touching ``base``.

    Returns a summary dict on success; raises FingerprintMismatch or
    DeltaError otherwise.
    """
    expect = base_fingerprint(base)
    if delta.base_fingerprint != expect:
        raise FingerprintMismatch(
            f"delta fingerprint {delta.base_fingerprint.hex()[:16]}... does not "
            f"match base {expect.hex()[:16]}...")
    params = dict((n, t) for n, t, _ in base.named_parameters())
    for e in delta.entries:
        if e.name not in params:
            raise DeltaError(f"delta entry {e.name!r} has no matching parameter "
                             "in the base network")
        want = params[e.name].data.shape
        if tuple(e.values.shape) != tuple(want):
            raise DeltaError(
                f"delta entry {e.name!r} has shape {e.values.shape}, "
                f"base parameter has {want}")
    return {"entries": len(delta.entries),
            "payload_bytes": delta.payload_bytes(),
            "fingerprint": delta.base_fingerprint.hex()}


def apply_delta(base: Network, delta: KmDelta) -> Network:
    """Overlay a task delta on a copy of ``base``; the base is unmodified.

    The copy's norm running statistics are reset to their identity
    defaults before the delta's folded affine entries land, which is what
    makes eval outputs reproduce bit-exactly. Validation happens before
    any assignment, so failures leave nothing half-applied.
    """
    check_delta(base, delta)
    out = _clone_network(base)
    out.reset_running_stats()
    params = dict((n, t) for n, t, _ in out.named_parameters())
    for e in delta.entries:
        t = params[e.name]
        t.data = e.values.astype(t.data.dtype).copy()
    return out


# -- fleet memory accounting -----------------------------------------------------


@dataclass
class MemoryReport:
    base_bytes: float
    per_task_bytes: float
    task_count: int
    naive_total_bytes: float
    km_total_bytes: float
    reduction_factor: float
    per_task_reduction_factor: float


def memory_report(base_bytes, per_task_bytes, task_count) -> MemoryReport:
    """Fleet storage: one shared base plus per-task deltas, versus N full copies.

    reduction_factor compares the two totals; per_task_reduction_factor is
    base/per-task (the per-network saving).
    """
    if base_bytes <= 0 or per_task_bytes <= 0 or task_count <= 0:
        raise DeltaError("memory_report needs positive base, per-task, and count")
    naive = task_count * base_bytes
    km = base_bytes + task_count * per_task_bytes
    return MemoryReport(
        base_bytes=base_bytes,
        per_task_bytes=per_task_bytes,
        task_count=task_count,
        naive_total_bytes=naive,
        km_total_bytes=km,
        reduction_factor=naive / km,
        per_task_reduction_factor=base_bytes / per_task_bytes,
    )


# -- full checkpoints (artifact-internal; lets the CLI round-trip whole networks) --

CKPT_MAGIC = b"KMC1"
KIND_PARAM = 10
KIND_RUNNING_MU = 11
KIND_RUNNING_SIGMA = 12


def save_checkpoint(net: Network, path: str):
    """Write the full network (config line + every tensor) to a KMC1 file."""
    cfg_lines = []
    s = net.spec
    cfg_lines.append(f"arch={s.arch}")
    cfg_lines.append(f"n_blocks={s.n_blocks}")
    cfg_lines.append(f"base_width={s.base_width}")
    cfg_lines.append(f"input_shape={','.join(str(i) for i in s.input_shape)}")
    cfg_lines.append(f"class_count={s.class_count}")
    cfg_lines.append(f"norm_kind={s.norm_kind}")
    cfg_lines.append(f"groups={'' if s.groups is None else s.groups}")
    cfg_lines.append(f"modulator_depth={s.modulator_depth}")
    cfg_lines.append(f"modulator_activation={s.modulator_activation}")
    cfg_lines.append(f"modulator_init={s.modulator_init}")
    cfg_lines.append(f"modulator_sigma={s.modulator_sigma!r}")
    cfg_lines.append(f"mask={','.join(net.mask.enabled())}")
    cfg_lines.append(f"init_seed={net.init_seed}")
    cfg = "\n".join(cfg_lines).encode()

    entries = [(n, KIND_PARAM, t.data) for n, t, _ in net.named_parameters()]
    for name, layer in net.norm_layers:
        entries.append((f"{name}.running_mu", KIND_RUNNING_MU, layer.running_mu))
        entries.append((f"{name}.running_sigma", KIND_RUNNING_SIGMA, layer.running_sigma))

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(entries)))
        for name, kind, arr in entries:
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", kind, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DeltaError(f"truncated checkpoint {path} at offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise DeltaError(f"{path} is not a KMC1 checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise DeltaError(f"unsupported KMC1 version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = dict(line.split("=", 1) for line in take(cfg_len).decode().splitlines())

    spec = NetworkSpec(
        arch=cfg["arch"],
        n_blocks=int(cfg["n_blocks"]),
        base_width=int(cfg["base_width"]),
        input_shape=tuple(int(v) for v in cfg["input_shape"].split(",")),
        class_count=int(cfg["class_count"]),
        norm_kind=cfg["norm_kind"],
        groups=int(cfg["groups"]) if cfg["groups"] else None,
        modulator_depth=int(cfg["modulator_depth"]),
        modulator_activation=cfg["modulator_activation"],
        modulator_init=cfg["modulator_init"],
        modulator_sigma=float(cfg["modulator_sigma"]),
    )
    mask = ParamGroupMask.from_names(cfg["mask"].split(","))
    net = build_network(spec, mask, int(cfg["init_seed"]))

    params = dict((n, t) for n, t, _ in net.named_parameters())
    norms = dict(net.norm_layers)
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        kind, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims).astype(np.float32)
        if kind == KIND_PARAM:
            params[name].data = values
        elif kind == KIND_RUNNING_MU:
            norms[name.rsplit(".running_mu", 1)[0]].running_mu = values
        elif kind == KIND_RUNNING_SIGMA:
            norms[name.rsplit(".running_sigma", 1)[0]].running_sigma = values
        else:
            raise DeltaError(f"unknown checkpoint entry kind {kind}")
    return net
