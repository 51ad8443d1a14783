"""Asynchronous feature-encode service and its framed wire protocol.

Frame layout (little-endian throughout): magic "CVFB", version byte 0x01,
then an op byte.  Request (0x01): step u64, rank u32.  Response (0x81):
step u64, rank u32, bucket u16, tensor count u8, then per tensor name-len
u8 + name + dtype code + rank u8 + dims u32*rank + payload.  Error (0xFF):
code u16, message-len u16, utf-8 message.  Dtype codes: 0x00 f32, 0x01 f64,
0x02 u32; latents and text embeddings travel as f64 so a served batch is
bit-identical to a locally encoded one.

Batch composition is a pure function of (seed, step, rank): the server is
stateless and replayable, ranks at one step draw disjoint sample slices,
and a restart serves identical payloads.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curation import assign_bucket
from .dit import TextEncoder
from .errors import ConfigError, ContractError, ProtocolError, VidflowError
from .rng import Rng
from .tensor import Tensor
from .vae3d import CausalVae3d, PixelVideo

MAGIC = b"CVFB"
VERSION = 0x01
OP_REQUEST = 0x01
OP_RESPONSE = 0x81
OP_ERROR = 0xFF

DTYPES = {0x00: "<f4", 0x01: "<f8", 0x02: "<u4"}
DTYPE_CODES = {np.dtype("float32"): 0x00, np.dtype("float64"): 0x01,
               np.dtype("uint32"): 0x02}

MAX_TENSOR_ELEMS = 1 << 24
ERR_BAD_REQUEST = 1
ERR_COMPOSE = 2


class RetriableError(VidflowError, TimeoutError):
    """Transient transport failure; the caller may retry."""


@dataclass
class FeatureBatch:
    """Latents plus text embeddings keyed by (step, rank) within a run."""

    step: int
    rank: int
    bucket: int
    latents: Tensor
    text_emb: Tensor
    sample_ids: list[int]


@dataclass
class Request:
    step: int
    rank: int


@dataclass
class ErrorReply:
    code: int
    message: str


# --- encoding ----------------------------------------------------------------

def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    code = DTYPE_CODES[arr.dtype]
    name_b = name.encode()
    parts = [struct.pack("<B", len(name_b)), name_b,
             struct.pack("<BB", code, arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape),
             np.ascontiguousarray(arr).tobytes()]
    return b"".join(parts)


def encode_request(step: int, rank: int) -> bytes:
    return MAGIC + struct.pack("<BBQI", VERSION, OP_REQUEST, step, rank)


def encode_response(batch: FeatureBatch) -> bytes:
    tensors = [
        ("latents", batch.latents.values.astype("<f8")),
        ("text_emb", batch.text_emb.values.astype("<f8")),
        ("sample_ids", np.asarray(batch.sample_ids, dtype="<u4")),
    ]
    body = b"".join(_encode_tensor(n, a) for n, a in tensors)
    head = MAGIC + struct.pack("<BBQIHB", VERSION, OP_RESPONSE, batch.step,
                               batch.rank, batch.bucket, len(tensors))
    return head + body


def encode_error(code: int, message: str) -> bytes:
    msg = message.encode()[:65535]
    return MAGIC + struct.pack("<BBHH", VERSION, OP_ERROR, code, len(msg)) + msg


# --- decoding ----------------------------------------------------------------

class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ProtocolError("truncated frame", offset=self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_frame(buf: bytes):
    """Parse one frame from buf; returns (message, bytes consumed).

    Every byte string either parses or raises ProtocolError; nothing else
    escapes, and payload sizes are validated before allocation.
    """
    cur = _Cursor(bytes(buf))
    if cur.take(4) != MAGIC:
        raise ProtocolError(f"bad magic {buf[:4]!r}", offset=0)
    (version, op) = cur.unpack("<BB")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", offset=4)
    if op == OP_REQUEST:
        step, rank = cur.unpack("<QI")
        return Request(step=step, rank=rank), cur.off
    if op == OP_ERROR:
        code, msg_len = cur.unpack("<HH")
        raw = cur.take(msg_len)
        try:
            message = raw.decode()
        except UnicodeDecodeError as exc:
            raise ProtocolError("error message is not utf-8", offset=cur.off) from exc
        return ErrorReply(code=code, message=message), cur.off
    if op != OP_RESPONSE:
        raise ProtocolError(f"unknown op 0x{op:02x}", offset=5)

    step, rank, bucket, count = cur.unpack("<QIHB")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<B")
        raw_name = cur.take(name_len)
        try:
            name = raw_name.decode()
        except UnicodeDecodeError as exc:
            raise ProtocolError("tensor name is not utf-8", offset=cur.off) from exc
        code, t_rank = cur.unpack("<BB")
        if code not in DTYPES:
            raise ProtocolError(f"unknown dtype code 0x{code:02x}", offset=cur.off)
        dims = cur.unpack(f"<{t_rank}I")
        elems = 1
        for d in dims:
            elems *= d
        if elems > MAX_TENSOR_ELEMS:
            raise ProtocolError(f"tensor too large: {dims}", offset=cur.off)
        dtype = np.dtype(DTYPES[code])
        payload = cur.take(int(elems) * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims)
    for required in ("latents", "text_emb", "sample_ids"):
        if required not in tensors:
            raise ProtocolError(f"response missing tensor {required!r}", offset=cur.off)
    batch = FeatureBatch(
        step=step, rank=rank, bucket=bucket,
        latents=Tensor(tensors["latents"].astype(np.float64)),
        text_emb=Tensor(tensors["text_emb"].astype(np.float64)),
        sample_ids=[int(i) for i in tensors["sample_ids"]])
    return batch, cur.off


def read_frame(rfile):
    """Incrementally read one frame from a binary stream."""

    def exactly(n: int) -> bytes:
        data = rfile.read(n)
        if data is None or len(data) != n:
            raise ProtocolError(f"stream ended mid-frame (wanted {n} bytes)")
        return data

    head = exactly(6)
    if head[:4] != MAGIC:
        raise ProtocolError(f"bad magic {head[:4]!r}", offset=0)
    version, op = head[4], head[5]
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", offset=4)
    if op == OP_REQUEST:
        return decode_frame(head + exactly(12))[0]
    if op == OP_ERROR:
        meta = exactly(4)
        (_, msg_len) = struct.unpack("<HH", meta)
        return decode_frame(head + meta + exactly(msg_len))[0]
    if op != OP_RESPONSE:
        raise ProtocolError(f"unknown op 0x{op:02x}", offset=5)
    meta = exactly(15)
    buf = bytearray(head + meta)
    (count,) = struct.unpack_from("<B", meta, 14)
    for _ in range(count):
        name_len_b = exactly(1)
        buf += name_len_b
        buf += exactly(name_len_b[0])
        code_rank = exactly(2)
        buf += code_rank
        code, t_rank = code_rank
        if code not in DTYPES:
            raise ProtocolError(f"unknown dtype code 0x{code:02x}")
        dims_b = exactly(4 * t_rank)
        buf += dims_b
        dims = struct.unpack(f"<{t_rank}I", dims_b)
        elems = 1
        for d in dims:
            elems *= d
        if elems > MAX_TENSOR_ELEMS:
            raise ProtocolError(f"tensor too large: {dims}")
        buf += exactly(int(elems) * np.dtype(DTYPES[code]).itemsize)
    return decode_frame(bytes(buf))[0]


# --- dataset + composition -----------------------------------------------------

class ServedDataset:
    """Bucketed encode source over toy video items.

    Encoding (video -> latent, caption -> embedding) happens on demand and
    is cached by item id; composition is pure in (seed, step, rank).
    """

    def __init__(self, items, vae_seed: int = 0, text_seed: int = 0,
                 world_size: int = 1, cond_dim: int = 32, fps: float = 8.0):
        if world_size < 1:
            raise ConfigError("world_size must be >= 1")
        self.items = list(items)
        self.world_size = world_size
        self.vae = CausalVae3d(vae_seed)
        self.text = TextEncoder(cond_dim=cond_dim, seed=text_seed)
        self.fps = fps
        buckets: dict[tuple, list[int]] = {}
        for idx, item in enumerate(self.items):
            frames = item.frames
            b = assign_bucket(frames.shape[3], frames.shape[2],
                              (frames.shape[0] - 1) / fps)
            key = (b.aspect_id, b.duration_s, frames.shape[0],
                   frames.shape[2], frames.shape[3], b.max_batch)
            buckets.setdefault(key, []).append(idx)
        self.bucket_keys = sorted(buckets)
        self.bucket_items = [buckets[k] for k in self.bucket_keys]
        for key, members in zip(self.bucket_keys, self.bucket_items):
            if len(members) < world_size:
                raise ConfigError(
                    f"bucket {key[:2]} has {len(members)} items < world {world_size}")
        self._latent_cache: dict[int, np.ndarray] = {}

    def _encode_item(self, idx: int) -> np.ndarray:
        if idx not in self._latent_cache:
            video = PixelVideo(Tensor(self.items[idx].frames))
            self._latent_cache[idx] = self.vae.encode(video).latent.values
        return self._latent_cache[idx]

    def compose(self, seed: int, step: int, rank: int) -> FeatureBatch:
        if rank >= self.world_size:
            raise ContractError(f"rank {rank} >= world_size {self.world_size}")
        root = Rng(seed)
        bucket_id = int(root.stream("bucket", step, rank).integers(0, len(self.bucket_keys)))
        members = self.bucket_items[bucket_id]
        batch_size = min(self.bucket_keys[bucket_id][5],
                         len(members) // self.world_size)
        perm = root.stream("order", step, bucket_id).permutation(len(members))
        picked = [members[int(p)] for p in
                  perm[rank * batch_size:(rank + 1) * batch_size]]
        latents = np.stack([self._encode_item(i) for i in picked])
        texts = np.stack([self.text.encode(self.items[i].caption) for i in picked])
        return FeatureBatch(step=step, rank=rank, bucket=bucket_id,
                            latents=Tensor(latents), text_emb=Tensor(texts),
                            sample_ids=picked)


# --- service ---------------------------------------------------------------------

class _PrefixedReader:
    """Binary reader that replays already-consumed bytes first."""

    def __init__(self, prefix: bytes, rfile):
        self._prefix = prefix
        self._rfile = rfile

    def read(self, n: int) -> bytes:
        out = b""
        if self._prefix:
            out, self._prefix = self._prefix[:n], self._prefix[n:]
        if len(out) < n:
            out += self._rfile.read(n - len(out)) or b""
        return out


def handle_connection(rfile, wfile, dataset: ServedDataset, seed: int):
    """Serve framed requests on one duplex stream until EOF."""
    while True:
        first = rfile.read(1)
        if not first:
            return  # clean close between frames
        try:
            msg = read_frame(_PrefixedReader(first, rfile))
        except ProtocolError as exc:
            wfile.write(encode_error(ERR_BAD_REQUEST, str(exc)))
            wfile.flush()
            return
        if not isinstance(msg, Request):
            wfile.write(encode_error(ERR_BAD_REQUEST, "expected a request frame"))
            wfile.flush()
            return
        try:
            batch = dataset.compose(seed, msg.step, msg.rank)
            wfile.write(encode_response(batch))
        except VidflowError as exc:
            wfile.write(encode_error(ERR_COMPOSE, str(exc)))
        wfile.flush()


class EncodeService:
    """Threaded TCP service answering batch requests."""

    def __init__(self, bind_address: tuple, dataset: ServedDataset, seed: int):
        self.dataset = dataset
        self.seed = seed
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                handle_connection(self.rfile, self.wfile, outer.dataset, outer.seed)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        try:
            self._server = Server(bind_address, Handler)
        except OSError as exc:
            raise ConfigError(f"cannot bind {bind_address}: {exc}") from exc
        self.endpoint = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)

    def start(self) -> "EncodeService":
        self._thread.start()
        return self

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def serve(bind_address: tuple, dataset: ServedDataset, seed: int) -> EncodeService:
    return EncodeService(bind_address, dataset, seed).start()


def request_batch(endpoint: tuple, step: int, rank: int,
                  timeout: float = 10.0) -> FeatureBatch:
    """One request per connection; timeouts surface as retriable errors."""
    try:
        with socket.create_connection(endpoint, timeout=timeout) as conn:
            conn.sendall(encode_request(step, rank))
            with conn.makefile("rb") as rfile:
                msg = read_frame(rfile)
    except (socket.timeout, TimeoutError) as exc:
        raise RetriableError(f"request (step={step}, rank={rank}) timed out") from exc
    if isinstance(msg, ErrorReply):
        raise ProtocolError(f"server error {msg.code}: {msg.message}")
    if not isinstance(msg, FeatureBatch):
        raise ProtocolError("expected a response frame")
    return msg


# --- file spool mode --------------------------------------------------------------

def spool_path(out_dir, step: int, rank: int) -> Path:
    return Path(out_dir) / f"step{step:08d}_rank{rank:04d}.cvfb"


def spool_batches(dataset: ServedDataset, seed: int, steps: int, out_dir) -> int:
    """Write the same framed response records to disk instead of a socket."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for step in range(steps):
        for rank in range(dataset.world_size):
            frame = encode_response(dataset.compose(seed, step, rank))
            spool_path(out, step, rank).write_bytes(frame)
            written += 1
    return written


def read_spooled(out_dir, step: int, rank: int) -> FeatureBatch:
    path = spool_path(out_dir, step, rank)
    msg, _ = decode_frame(path.read_bytes())
    if not isinstance(msg, FeatureBatch):
        raise ProtocolError(f"{path} does not hold a response frame")
    return msg


# --- per-rank prefetch buffer -------------------------------------------------------

class BatchBuffer:
    """Step-keyed prefetch queue: a filler thread keeps `capacity` batches
    ahead; pops must ask for consecutive steps and block until available."""

    def __init__(self, fetch, capacity: int, start_step: int = 0):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.fetch = fetch
        self.capacity = capacity
        self.next_pop = start_step
        self._next_fetch = start_step
        self._items: dict[int, FeatureBatch] = {}
        self._cond = threading.Condition()
        self._stop = False
        self._error: Exception | None = None
        self._thread = threading.Thread(target=self._fill, daemon=True)

    def start(self) -> "BatchBuffer":
        self._thread.start()
        return self

    def _fill(self):
        while True:
            with self._cond:
                while len(self._items) >= self.capacity and not self._stop:
                    self._cond.wait()
                if self._stop:
                    return
                step = self._next_fetch
                self._next_fetch += 1
            try:
                batch = self.fetch(step)
            except Exception as exc:  # surfaced on the consumer side
                with self._cond:
                    self._error = exc
                    self._cond.notify_all()
                return
            with self._cond:
                self._items[step] = batch
                self._cond.notify_all()

    def pop(self, step: int, timeout: float = 30.0) -> FeatureBatch:
        with self._cond:
            if step < self.next_pop:
                raise ContractError(f"step {step} already consumed")
            if step > self.next_pop:
                raise ContractError(
                    f"out-of-order pop: expected {self.next_pop}, got {step}")
            deadline = timeout
            while step not in self._items:
                if self._error is not None:
                    raise self._error
                if not self._cond.wait(timeout=deadline):
                    raise RetriableError(f"pop(step={step}) timed out")
            batch = self._items.pop(step)
            self.next_pop = step + 1
            self._cond.notify_all()
        if batch.step != step:
            raise ContractError(f"buffer returned step {batch.step} for pop({step})")
        return batch

    def stop(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        self._thread.join(timeout=5)

    def snapshot_steps(self) -> list[int]:
        with self._cond:
            return sorted(self._items)
