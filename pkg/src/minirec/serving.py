"""Low-latency scoring service with live incremental updates.

Readers score against an immutable parameter snapshot grabbed once per
request; the delta applier builds a new snapshot by copying only the
tensors a message touches and publishes it with a single reference swap,
version set last. Readers never lock and never observe a half-applied
message.

The item cache stores per-slot pooled embeddings and first-order partial
sums for item-side slots, keyed by (model_version, item key). Final
logits are assembled by the same code as the uncached path, so cached and
uncached scores are bit-identical; stale entries die with their version.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .artifact import load_artifact
from .config import PipelineConfig
from .delta_stream import DeltaMessage, apply_message, decode_delta, message_tensor_indices, validate_message
from .errors import MinirecError
from .features import FeatureSpec, FeatureVector, generate
from .model import EmbeddingTable, ModelParams, SlotPart, assemble, compute_parts, tensor_items

log = logging.getLogger("minirec.serving")

METRICS_WINDOW = 10_000


@dataclass(frozen=True)
class SlotPartition:
    """Feature slots split by which request side determines them.

    A slot whose source columns all start with "user_" is user-side and
    computed once per request; all "item_" is item-side and cacheable per
    item; anything else (crosses, mixed sources) must be computed fresh
    per (user, item) pair.
    """

    user: tuple[FeatureSpec, ...]
    item: tuple[FeatureSpec, ...]
    cross: tuple[FeatureSpec, ...]


def partition_slots(specs: tuple[FeatureSpec, ...]) -> SlotPartition:
    user, item, cross = [], [], []
    for spec in specs:
        if all(c.startswith("user_") for c in spec.source_columns):
            user.append(spec)
        elif all(c.startswith("item_") for c in spec.source_columns):
            item.append(spec)
        else:
            cross.append(spec)
    return SlotPartition(user=tuple(user), item=tuple(item), cross=tuple(cross))


class LruCache:
    """Classic LRU with linearizable per-key get-or-insert accounting."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get_or_insert(self, key, compute) -> tuple[object, bool]:
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key], True
            value = compute()
            self._data[key] = value
            if len(self._data) > self.capacity:
                self._data.popitem(last=False)
            return value, False

    def __len__(self) -> int:
        return len(self._data)


def lru_get_or_insert(cache: LruCache, key, compute) -> tuple[object, bool]:
    return cache.get_or_insert(key, compute)


@dataclass
class ScoreResponse:
    scores: list[float | None]
    model_version: int
    cache_hits: int

    def to_plain(self) -> dict:
        return {
            "scores": self.scores,
            "model_version": self.model_version,
            "cache_hits": self.cache_hits,
        }


class ServingModel:
    """Versioned parameter store with copy-on-write delta application."""

    def __init__(self, params: ModelParams, config: PipelineConfig):
        self._params = params
        self.config = config
        self.partition = partition_slots(config.feature_config)
        self._write_lock = threading.Lock()

    @property
    def version(self) -> int:
        return self._params.model_version

    def snapshot(self) -> ModelParams:
        return self._params

    def apply_delta(self, msg: DeltaMessage) -> int | None:
        """Apply one message; returns the new version, or None if skipped.

        Validation happens against the current snapshot before any copy,
        so a rejected message leaves version and parameters untouched.
        """
        with self._write_lock:
            current = self._params
            if msg.model_version <= current.model_version:
                return None
            validate_message(current, msg)
            fresh = _cow_copy(current, message_tensor_indices(msg))
            apply_message(fresh, msg)
            self._params = fresh
            return fresh.model_version


def _cow_copy(params: ModelParams, affected: set[int]) -> ModelParams:
    """Structural copy sharing every tensor not in `affected`."""
    arrays = [arr.copy() if i in affected else arr for i, (_, arr) in enumerate(tensor_items(params))]
    tables = {}
    pos = 0
    for spec in params.specs:
        old = params.tables[spec.name]
        tables[spec.name] = EmbeddingTable(
            old.name, old.vocab_size, old.dim, arrays[pos], arrays[pos + 1]
        )
        pos += 2
    mlp_weights, mlp_biases = [], []
    for _ in params.mlp_weights:
        mlp_weights.append(arrays[pos])
        mlp_biases.append(arrays[pos + 1])
        pos += 2
    return ModelParams(
        specs=params.specs,
        model_type=params.model_type,
        embedding_dim=params.embedding_dim,
        tables=tables,
        mlp_weights=mlp_weights,
        mlp_biases=mlp_biases,
        bias=arrays[pos],
        model_version=params.model_version,
    )


def load_model(path: str) -> ServingModel:
    artifact = load_artifact(path)
    return ServingModel(artifact.params, artifact.config)


def _as_record(features: dict) -> dict[str, str]:
    return {str(k): v if isinstance(v, str) else str(v) for k, v in features.items()}


def _merge_feature_vectors(*fvs: FeatureVector) -> FeatureVector:
    merged = FeatureVector()
    for fv in fvs:
        merged.ids.update(fv.ids)
        merged.weights.update(fv.weights)
        merged.dense.update(fv.dense)
    return merged


def score(
    model: ServingModel, request: dict, cache: LruCache | None = None
) -> ScoreResponse:
    """Score every item in the request against one parameter snapshot.

    Per-item feature failures yield a null score in that position; other
    items are unaffected. cache_hits counts item-side cache hits.
    """
    params = model.snapshot()
    part = model.partition
    user_record = _as_record(request.get("user") or {})
    user_fv = generate(user_record, part.user)
    user_parts = compute_parts(params, user_fv, part.user)

    scores: list[float | None] = []
    hits = 0
    for item in request.get("items") or []:
        try:
            if not isinstance(item, dict) or "key" not in item:
                raise MinirecError("item entry needs a key")
            item_record = _as_record(item.get("features") or {})

            def compute_item() -> tuple[FeatureVector, dict[str, SlotPart]]:
                fv = generate(item_record, part.item)
                return fv, compute_parts(params, fv, part.item)

            if cache is not None:
                (item_fv, item_parts), hit = cache.get_or_insert(
                    (params.model_version, str(item["key"])), compute_item
                )
                hits += hit
            else:
                item_fv, item_parts = compute_item()

            cross_fv = generate({**user_record, **item_record}, part.cross)
            cross_parts = compute_parts(params, cross_fv, part.cross)
            merged_fv = _merge_feature_vectors(user_fv, item_fv, cross_fv)
            trace = assemble(params, merged_fv, {**user_parts, **item_parts, **cross_parts})
            scores.append(float(trace.probability))
        except MinirecError:
            scores.append(None)
    return ScoreResponse(scores=scores, model_version=params.model_version, cache_hits=hits)


class _Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self._window: deque = deque(maxlen=METRICS_WINDOW)
        self.deltas_applied = 0

    def record(self, latency_us: float, cache_hits: int, items: int) -> None:
        with self._lock:
            self._window.append((time.monotonic(), latency_us, cache_hits, items))

    def delta_applied(self) -> None:
        with self._lock:
            self.deltas_applied += 1

    @staticmethod
    def _percentile(values: list[float], q: float) -> float:
        if not values:
            return 0.0
        ordered = sorted(values)
        rank = max(1, min(len(ordered), round(q * len(ordered) + 0.5)))
        return ordered[rank - 1]

    def snapshot(self) -> dict:
        with self._lock:
            window = list(self._window)
            deltas = self.deltas_applied
        latencies = [w[1] for w in window]
        total_items = sum(w[3] for w in window)
        total_hits = sum(w[2] for w in window)
        span = window[-1][0] - window[0][0] if len(window) > 1 else 0.0
        return {
            "qps": len(window) / span if span > 0 else 0.0,
            "cache_hit_rate": total_hits / total_items if total_items else 0.0,
            "latency_p50_us": self._percentile(latencies, 0.50),
            "latency_p95_us": self._percentile(latencies, 0.95),
            "latency_p99_us": self._percentile(latencies, 0.99),
            "deltas_applied": deltas,
        }


class _Poller(threading.Thread):
    def __init__(self, model: ServingModel, consumer, metrics: _Metrics, interval_s: float):
        super().__init__(daemon=True, name="minirec-delta-poller")
        self.model = model
        self.consumer = consumer
        self.metrics = metrics
        self.interval_s = interval_s
        self.stop_event = threading.Event()

    def run(self) -> None:
        while not self.stop_event.is_set():
            try:
                frame = self.consumer.consume(timeout=self.interval_s)
            except MinirecError as exc:
                log.warning("queue consume failed: %s", exc)
                time.sleep(self.interval_s)
                continue
            if frame is None:
                continue
            try:
                version = self.model.apply_delta(decode_delta(frame))
            except MinirecError as exc:
                log.warning("delta rejected: %s", exc)
                continue
            if version is not None:
                self.metrics.delta_applied()
                log.info("applied delta, model_version=%d", version)


@dataclass
class ServerHandle:
    address: tuple[str, int]
    _server: ThreadingHTTPServer
    _server_thread: threading.Thread
    _poller: _Poller | None

    def shutdown(self) -> None:
        if self._poller is not None:
            self._poller.stop_event.set()
            self._poller.join(timeout=5.0)
        self._server.shutdown()
        self._server_thread.join(timeout=5.0)
        self._server.server_close()


def http_serve(
    model: ServingModel,
    cache: LruCache | None,
    consumer=None,
    bind: tuple[str, int] = ("127.0.0.1", 0),
    poll_interval_ms: int = 1000,
) -> ServerHandle:
    """Start the HTTP service and (when a consumer is given) the poller.

    Endpoints: POST /v1/predict, GET /v1/version, GET /v1/metrics.
    Returns a handle with the bound address and a shutdown method.
    """
    metrics = _Metrics()

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:
            if self.path == "/v1/version":
                self._reply(200, {"model_version": model.version})
            elif self.path == "/v1/metrics":
                self._reply(200, metrics.snapshot())
            else:
                self._reply(404, {"error": f"no such path {self.path!r}"})

        def do_POST(self) -> None:
            if self.path != "/v1/predict":
                self._reply(404, {"error": f"no such path {self.path!r}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                request = json.loads(self.rfile.read(length).decode("utf-8"))
                if not isinstance(request, dict) or not isinstance(request.get("items"), list):
                    raise ValueError("request must be an object with an items array")
                if request.get("user") is not None and not isinstance(request["user"], dict):
                    raise ValueError("user must be an object")
            except (ValueError, UnicodeDecodeError) as exc:
                self._reply(400, {"error": str(exc)})
                return
            try:
                start = time.perf_counter()
                response = score(model, request, cache)
                latency_us = (time.perf_counter() - start) * 1e6
                metrics.record(latency_us, response.cache_hits, len(response.scores))
                self._reply(200, response.to_plain())
            except Exception as exc:  # pragma: no cover - defensive 500 path
                log.exception("predict failed")
                self._reply(500, {"error": str(exc)})

    server = ThreadingHTTPServer(bind, Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True, name="minirec-http")
    thread.start()
    poller = None
    if consumer is not None:
        poller = _Poller(model, consumer, metrics, poll_interval_ms / 1000.0)
        poller.start()
    host, port = server.server_address[:2]
    log.info("serving on %s:%d", host, port)
    return ServerHandle(address=(host, port), _server=server, _server_thread=thread, _poller=poller)
