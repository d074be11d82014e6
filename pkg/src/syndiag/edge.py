"""Edge head updates, the head-weight wire frame, cloud hot-swap and gradient auditing."""

from __future__ import annotations

import enum
import json
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import AdamW, OptimizerConfig, backward, content_hash, rng
from .backbone import DiagnosisModel, partition_hashes, predict
from .distill import DistillPair, student_features, student_partition, student_predict
from .encoders import PromptBank
from .metrics import compute_metrics

MAGIC = b"SDHW"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")  # magic, format version, header length


class Status(enum.IntEnum):
    OK = 0
    BAD_MAGIC = 1
    CHECKSUM = 2
    DIM_MISMATCH = 3
    STALE_VERSION = 4
    MALFORMED = 5
    NON_FINITE = 6
    UNSUPPORTED_FORMAT = 7


class ProtocolError(Exception):
    def __init__(self, status: Status, message: str, current_version: int | None = None):
        super().__init__(f"{status.name}: {message}")
        self.status = status
        self.current_version = current_version


@dataclass
class HeadWeights:
    version: int
    weight: np.ndarray  # [C, D] float32
    bias: np.ndarray  # [C] float32

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype="<f4")
        self.bias = np.ascontiguousarray(self.bias, dtype="<f4")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ProtocolError(Status.MALFORMED, "weight must be [C, D] and bias [C]")
        if self.version < 0:
            raise ProtocolError(Status.MALFORMED, "negative version")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def payload(self) -> bytes:
        return self.weight.tobytes() + self.bias.tobytes()

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload())

    @classmethod
    def from_linear(cls, head: nn.Linear, version: int) -> HeadWeights:
        return cls(version, head.weight.detach().numpy(), head.bias.detach().numpy())

    def load_into(self, head: nn.Linear):
        with torch.no_grad():
            head.weight.copy_(torch.from_numpy(self.weight.astype(np.float64)))
            head.bias.copy_(torch.from_numpy(self.bias.astype(np.float64)))


def serialize_head(head: HeadWeights) -> bytes:
    if not (np.isfinite(head.weight).all() and np.isfinite(head.bias).all()):
        raise ProtocolError(Status.NON_FINITE, "head contains NaN or infinite values")
    header = json.dumps({"C": head.n_classes, "D_T": head.dim, "version": int(head.version),
                         "checksum": head.checksum}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + head.payload()


def deserialize_head(frame: bytes, expect: tuple[int, int] | None = None) -> HeadWeights:
    """Parse a frame; ``expect=(C, D)`` adds the receiving model's dimension guard."""
    if len(frame) < _PREFIX.size:
        raise ProtocolError(Status.MALFORMED, "frame shorter than its prefix")
    magic, fmt, hlen = _PREFIX.unpack_from(frame)
    if magic != MAGIC:
        raise ProtocolError(Status.BAD_MAGIC, f"magic {magic!r}")
    if fmt != FORMAT_VERSION:
        raise ProtocolError(Status.UNSUPPORTED_FORMAT, f"format version {fmt}")
    body = frame[_PREFIX.size :]
    if hlen > len(body):
        raise ProtocolError(Status.MALFORMED, "header length exceeds frame")
    try:
        header = json.loads(body[:hlen])
        C, D, version, checksum = (int(header[k]) for k in ("C", "D_T", "version", "checksum"))
    except (ValueError, KeyError, TypeError) as e:
        raise ProtocolError(Status.MALFORMED, f"bad header: {e}") from None
    if C < 1 or D < 1 or version < 0:
        raise ProtocolError(Status.MALFORMED, "nonpositive dimensions or negative version")
    payload = body[hlen:]
    if len(payload) != 4 * (C * D + C):
        raise ProtocolError(Status.MALFORMED, f"payload is {len(payload)} bytes, header implies {4 * (C * D + C)}")
    if zlib.crc32(payload) != checksum:
        raise ProtocolError(Status.CHECKSUM, "payload CRC32 mismatch")
    if expect is not None and (C, D) != tuple(expect):
        raise ProtocolError(Status.DIM_MISMATCH, f"frame carries {C}x{D}, receiver expects {expect[0]}x{expect[1]}")
    values = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(values).all():
        raise ProtocolError(Status.NON_FINITE, "payload contains NaN or infinite values")
    return HeadWeights(version, values[: C * D].reshape(C, D).copy(), values[C * D :].copy())


def quantize_head_(head: nn.Linear):
    """Round head parameters to float32-representable values so the wire copy is exact."""
    with torch.no_grad():
        head.weight.copy_(head.weight.float().double())
        head.bias.copy_(head.bias.float().double())


# --------------------------------------------------------------------------
# cloud side


def cloud_swap(model: DiagnosisModel, head: HeadWeights, current_version: int) -> int:
    """Replace the model's head with ``head`` if it is newer; returns the new version."""
    expect = (model.head.out_features, model.head.in_features)
    if (head.n_classes, head.dim) != expect:
        raise ProtocolError(Status.DIM_MISMATCH, f"{head.n_classes}x{head.dim} vs {expect}", current_version)
    if head.version <= current_version:
        raise ProtocolError(Status.STALE_VERSION, f"version {head.version} is not newer than {current_version}",
                            current_version)
    head.load_into(model.head)
    return head.version


class CloudEndpoint:
    """Serialises uploads; inference and swaps share one lock so readers never see a half-written head."""

    def __init__(self, model: DiagnosisModel, bank: PromptBank, version: int = 0):
        self.model = model
        self.bank = bank
        self.version = version
        self._lock = threading.Lock()
        self.accepted: list[int] = []

    @property
    def expect(self) -> tuple[int, int]:
        return self.model.head.out_features, self.model.head.in_features

    def upload(self, frame: bytes) -> tuple[Status, int]:
        try:
            head = deserialize_head(frame, self.expect)
        except ProtocolError as e:
            return e.status, self.version
        with self._lock:
            try:
                self.version = cloud_swap(self.model, head, self.version)
            except ProtocolError as e:
                return e.status, self.version
            self.accepted.append(head.version)
            return Status.OK, self.version

    def head_bytes(self) -> bytes:
        with self._lock:
            return HeadWeights.from_linear(self.model.head, self.version).payload()

    def predict(self, images) -> np.ndarray:
        with self._lock:
            return predict(self.model, self.bank, images)


# stream transport: request = u32 LE length + frame, response = status byte + u64 LE version
_LEN = struct.Struct("<I")
_RESP = struct.Struct("<BQ")
MAX_FRAME = 64 << 20


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        buf += chunk
    return bytes(buf)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        endpoint: CloudEndpoint = self.server.endpoint
        while True:
            try:
                (n,) = _LEN.unpack(_recv_exact(self.request, _LEN.size))
            except ConnectionError:
                return
            if n > MAX_FRAME:
                self.request.sendall(_RESP.pack(Status.MALFORMED, endpoint.version))
                return
            status, version = endpoint.upload(_recv_exact(self.request, n))
            self.request.sendall(_RESP.pack(status, version))


class CloudServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, endpoint: CloudEndpoint, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.endpoint = endpoint
        self._thread: threading.Thread | None = None

    def __enter__(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.shutdown()
        self.server_close()


class CloudClient:
    def __init__(self, address: tuple[str, int]):
        self.sock = socket.create_connection(address)

    def upload(self, frame: bytes) -> tuple[Status, int]:
        self.sock.sendall(_LEN.pack(len(frame)) + frame)
        status, version = _RESP.unpack(_recv_exact(self.sock, _RESP.size))
        return Status(status), version

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# edge side


@dataclass
class EdgeConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0


@dataclass
class EdgeUpdate:
    head: HeadWeights
    losses: list[float]  # loss on the new samples before training and after each epoch


class EdgeNode:
    """The student pair with its own deployed copy of the shared head."""

    def __init__(self, pair: DistillPair, bank: PromptBank, version: int = 0):
        self.pair = pair
        self.bank = bank
        self.version = version
        pair.deploy_head()
        quantize_head_(pair.head)

    @property
    def head(self) -> nn.Linear:
        return self.pair.head

    def predict(self, images) -> np.ndarray:
        return student_predict(self.pair, self.bank, images)

    def non_head_hashes(self) -> dict[str, str]:
        return {"teacher": content_hash(dict(self.pair.teacher.named_parameters())),
                **partition_hashes(self.pair.student, student_partition)}


def edge_update(node: EdgeNode, images, labels, config: EdgeConfig) -> EdgeUpdate:
    """Fine-tune only the edge head on newly labelled samples and emit the next version."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) == 0:
        raise ValueError("no new samples")
    with torch.no_grad():
        feats = student_features(images, node.bank, node.pair)  # everything upstream of the head is frozen
    head = node.head
    head.requires_grad_(True)
    opt = AdamW(head.parameters(), OptimizerConfig(config.learning_rate, config.weight_decay))
    gen = rng(config.seed, 909, node.version)

    def full_loss():
        with torch.no_grad():
            return F.cross_entropy(head(feats), labels).item()

    losses = [full_loss()]
    for _ in range(config.epochs):
        order = gen.permutation(len(labels))
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i : i + config.batch_size])
            loss = F.cross_entropy(head(feats[idx]), labels[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
        losses.append(full_loss())
    head.requires_grad_(False)
    quantize_head_(head)
    node.version += 1
    return EdgeUpdate(HeadWeights.from_linear(head, node.version), losses)


# --------------------------------------------------------------------------
# gradient consistency


def head_gradient(head: nn.Linear, feature: torch.Tensor, label: int) -> torch.Tensor:
    """Flattened ``d CE / d (W_cls, b_cls)`` for a single feature vector."""
    params = {"weight": head.weight.detach().requires_grad_(True), "bias": head.bias.detach().requires_grad_(True)}
    with torch.enable_grad():
        logits = feature.detach() @ params["weight"].T + params["bias"]
        loss = F.cross_entropy(logits[None], torch.tensor([label]))
        g = backward(loss, params)
    return torch.cat([g["weight"].ravel(), g["bias"]])


def gradient_consistency(head: nn.Linear, h_T: torch.Tensor, h_S: torch.Tensor, label: int) -> tuple[float, float]:
    """Cosine and magnitude ratio ``|g_S| / |g_T|`` of head gradients along the two paths."""
    g_T = head_gradient(head, h_T, label)
    g_S = head_gradient(head, h_S, label)
    n_T, n_S = g_T.norm(), g_S.norm()
    if n_T == 0 or n_S == 0:
        raise ValueError("zero head gradient; cosine undefined")
    cos = (g_T @ g_S / (n_T * n_S)).clamp(-1.0, 1.0)
    return cos.item(), (n_S / n_T).item()


@torch.no_grad()
def gradient_audit(pair: DistillPair, bank: PromptBank, images, labels) -> tuple[np.ndarray, np.ndarray]:
    h_T = pair.teacher.features(images, bank)
    h_S = student_features(images, bank, pair)
    pairs = [gradient_consistency(pair.head, h_T[i], h_S[i], int(y)) for i, y in enumerate(labels)]
    cos, ratio = np.array(pairs).T
    return cos, ratio


# --------------------------------------------------------------------------
# update cycles


@dataclass
class UpdateCycleReport:
    cycle: int  # 0 is the state before any update
    samples_used: int
    version: int
    student: dict
    teacher: dict
    grad_cosine: float
    grad_magnitude_ratio: float
    status: str = "OK"
    edge_losses: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {"cycle": self.cycle, "samples_used": self.samples_used, "version": self.version,
                "student_accuracy": self.student["accuracy"], "student_precision": self.student["precision"],
                "student_f1": self.student["f1"], "teacher_accuracy": self.teacher["accuracy"],
                "teacher_precision": self.teacher["precision"], "teacher_f1": self.teacher["f1"],
                "grad_cosine": self.grad_cosine, "grad_magnitude_ratio": self.grad_magnitude_ratio,
                "status": self.status}


def _scores(y, pred) -> dict:
    m = compute_metrics(y, pred)
    return {"accuracy": m.accuracy, "precision": m.precision, "f1": m.f1}


def run_update_cycles(node: EdgeNode, cloud, test: tuple, pool: tuple, n_cycles: int = 30, per_class: int = 3,
                      config: EdgeConfig = EdgeConfig(), probe: tuple | None = None, seed: int = 0,
                      upload=None) -> list[UpdateCycleReport]:
    """Edge update -> serialise -> upload -> evaluate, ``n_cycles`` times.

    ``cloud`` is a :class:`CloudEndpoint`; ``upload`` overrides the transport
    (for example a :class:`CloudClient`'s ``upload``). ``probe`` is an
    ``(images, labels)`` set for the gradient audit; it defaults to each
    cycle's new samples.
    """
    upload = upload or cloud.upload
    test_x, test_y = test
    pool_x, pool_y = np.asarray(pool[0]), np.asarray(pool[1])
    gen = rng(seed, 1001)
    remaining = {int(c): list(gen.permutation(np.flatnonzero(pool_y == c))) for c in np.unique(pool_y)}

    def report(cycle, used, status, losses, audit):
        cos, ratio = gradient_audit(node.pair, node.bank, *audit)
        return UpdateCycleReport(cycle, used, node.version, _scores(test_y, node.predict(test_x)),
                                 _scores(test_y, cloud.predict(test_x)), float(np.median(cos)),
                                 float(np.median(ratio)), status, losses)

    first = probe or (pool_x[: 3 * len(remaining)], pool_y[: 3 * len(remaining)])
    reports = [report(0, 0, "OK", [], first)]
    for cycle in range(1, n_cycles + 1):
        if any(len(v) < per_class for v in remaining.values()):
            break
        idx = np.concatenate([[remaining[c].pop() for _ in range(per_class)] for c in sorted(remaining)])
        upd = edge_update(node, pool_x[idx], pool_y[idx], config)
        status, _ = upload(serialize_head(upd.head))
        reports.append(report(cycle, len(idx), Status(status).name, upd.losses,
                              probe or (pool_x[idx], pool_y[idx])))
    return reports
