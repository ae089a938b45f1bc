"""Master broker: finds edge brokers, maps their topics, redirects clients.

The master never carries payload traffic.  It probes an address range for
listening brokers, enumerates each broker's topics by subscribing to '#'
and collecting the replayed messages, and keeps the result as an
immutable registry snapshot.  Clients connect as if it were an ordinary
broker; the master answers their SUBSCRIBE (or PUBLISH) with a DISCONNECT
carrying a server reference to the edge broker that actually hosts the
topic, then hangs up.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import BrokerUnreachable, ConnectionClosed
from .packets import (
    BrokerRef,
    ConnAck,
    Connect,
    Disconnect,
    MalformedFilter,
    MalformedPacket,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    Reason,
    SubAck,
    Subscribe,
    topic_matches,
    validate_filter,
)
from .stream import PacketConnection, open_connection

logger = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
_PROBE_WORKERS = 32


@dataclass(frozen=True)
class DiscoveryConfig:
    """Where and how patiently to look for edge brokers."""

    addresses: tuple[str, ...]
    broker_port: int = 1883
    timeout: float = 0.25        # per-address TCP probe budget
    listen_window: float = 0.5   # how long to collect topics per broker
    refresh_period: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "addresses", tuple(self.addresses))
        for name in ("timeout", "listen_window", "refresh_period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Registry:
    """One consistent view of who hosts what.  Never mutated in place."""

    topics_by_broker: dict[BrokerRef, frozenset[str]] = field(default_factory=dict)

    def brokers(self) -> list[BrokerRef]:
        return sorted(self.topics_by_broker, key=str)

    def topics_of(self, ref: BrokerRef) -> frozenset[str]:
        return self.topics_by_broker.get(ref, frozenset())

    def find(self, topic_filter: str) -> BrokerRef | None:
        """First broker (by address order) hosting a matching topic."""
        for ref in self.brokers():
            if any(topic_matches(topic_filter, t)
                   for t in self.topics_by_broker[ref]):
                return ref
        return None

    def __len__(self) -> int:
        return len(self.topics_by_broker)


def broker_discovery(config: DiscoveryConfig) -> list[BrokerRef]:
    """Probe every configured address; keep those that accept TCP."""

    def probe(host: str) -> BrokerRef | None:
        try:
            with socket.create_connection((host, config.broker_port),
                                          timeout=config.timeout):
                return BrokerRef(host, config.broker_port)
        except OSError:
            return None

    if not config.addresses:
        return []
    workers = min(_PROBE_WORKERS, len(config.addresses))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        found = [ref for ref in pool.map(probe, config.addresses) if ref]
    return sorted(found, key=str)


def topic_discovery(ref: BrokerRef, timeout: float,
                    listen_window: float) -> frozenset[str]:
    """Ask one broker for its topic population.

    Subscribes to '#' and records the topic of every message replayed or
    routed to us within the listen window.  Raises BrokerUnreachable if
    the broker refuses, breaks the handshake, or dies mid-census; a
    DISCONNECT from the broker just ends the census early.
    """
    try:
        conn = open_connection(ref.host, ref.port, timeout)
    except OSError as exc:
        raise BrokerUnreachable(f"{ref}: {exc}") from exc
    topics: set[str] = set()
    try:
        conn.send(Connect(f"census-{ref.host}-{ref.port}"))
        ack = conn.recv(timeout=timeout)
        if not isinstance(ack, ConnAck) or ack.reason != Reason.SUCCESS:
            raise BrokerUnreachable(f"{ref}: bad handshake reply {ack!r}")
        conn.send(Subscribe(1, ("#",)))
        suback = conn.recv(timeout=timeout)
        if not isinstance(suback, SubAck) or suback.reasons[0] != Reason.SUCCESS:
            raise BrokerUnreachable(f"{ref}: census subscription refused")
        deadline = time.monotonic() + listen_window
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                break
            try:
                packet = conn.recv(timeout=left)
            except TimeoutError:
                break
            if packet is None:
                raise BrokerUnreachable(f"{ref}: hung up during census")
            if isinstance(packet, Publish):
                topics.add(packet.topic)
                if packet.qos == 1:
                    conn.send(PubAck(packet.packet_id))
            elif isinstance(packet, Disconnect):
                return frozenset(topics)
        try:
            conn.send(Disconnect(Reason.NORMAL))
        except ConnectionClosed:
            pass
        return frozenset(topics)
    except (ConnectionClosed, MalformedPacket, TimeoutError) as exc:
        raise BrokerUnreachable(f"{ref}: {exc}") from exc
    finally:
        conn.close()


class MasterBroker:
    """Topic directory speaking MQTT on the client side."""

    def __init__(self, discovery: DiscoveryConfig,
                 host: str = "127.0.0.1", port: int = 1884):
        self._discovery = discovery
        self._host = host
        self._port = port
        self._lock = threading.RLock()
        self._refresh_lock = threading.Lock()
        self._registry = Registry()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._conns: set[PacketConnection] = set()
        self._stop = threading.Event()
        self._anon = itertools.count(1)
        self.connection_count = 0  # lifetime client connections, for tests

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "MasterBroker":
        self.refresh_registry()
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self._host, self._port))
        listener.listen(64)
        self._port = listener.getsockname()[1]
        self._listener = listener
        self._spawn(self._accept_loop)
        self._spawn(self._refresh_loop)
        logger.info("master listening on %s, %d broker(s) registered",
                    self.address, len(self.registry))
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        for thread in self._threads:
            thread.join(timeout=2)

    def _spawn(self, target, *args) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads = [t for t in self._threads if t.is_alive()]
        self._threads.append(thread)

    @property
    def address(self) -> BrokerRef:
        return BrokerRef(self._host, self._port)

    # -- registry -----------------------------------------------------------

    @property
    def registry(self) -> Registry:
        with self._lock:
            return self._registry

    def refresh_registry(self) -> Registry:
        """Probe, census every reachable broker, swap in the new snapshot.

        A broker that dies between probe and census just drops out; one
        broker's failure never aborts the rest of the sweep.
        """
        with self._refresh_lock:
            refs = broker_discovery(self._discovery)
            entries: dict[BrokerRef, frozenset[str]] = {}

            def census(ref: BrokerRef):
                try:
                    return ref, topic_discovery(
                        ref, self._discovery.timeout,
                        self._discovery.listen_window)
                except BrokerUnreachable as exc:
                    logger.warning("census failed: %s", exc)
                    return ref, None

            if refs:
                with ThreadPoolExecutor(max_workers=min(_PROBE_WORKERS,
                                                        len(refs))) as pool:
                    for ref, topics in pool.map(census, refs):
                        if topics is not None:
                            entries[ref] = topics
            registry = Registry(entries)
            with self._lock:
                self._registry = registry
            logger.info("registry refreshed: %s",
                        {str(r): len(t) for r, t in entries.items()} or "empty")
            return registry

    def _refresh_loop(self) -> None:
        while not self._stop.wait(self._discovery.refresh_period):
            try:
                self.refresh_registry()
            except Exception:
                logger.exception("periodic refresh failed")

    def resolve(self, topic_filter: str, *, refresh: bool = False) -> BrokerRef | None:
        """Which broker hosts this filter, per the current registry.

        With refresh=True a miss triggers one registry rebuild and a
        second look before giving up.
        """
        ref = self.registry.find(topic_filter)
        if ref is None and refresh:
            ref = self.refresh_registry().find(topic_filter)
        return ref

    # -- client side ----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self.connection_count += 1
            self._spawn(self._serve_client, sock)

    def _serve_client(self, sock: socket.socket) -> None:
        conn = PacketConnection(sock)
        with self._lock:
            self._conns.add(conn)
        try:
            first = conn.recv(timeout=HANDSHAKE_TIMEOUT)
            if not isinstance(first, Connect):
                return
            conn.send(ConnAck(Reason.SUCCESS))
            while True:
                packet = conn.recv()
                if packet is None or isinstance(packet, Disconnect):
                    return
                if isinstance(packet, PingReq):
                    conn.send(PingResp())
                elif isinstance(packet, Subscribe):
                    self._answer_subscribe(conn, packet)
                    return
                elif isinstance(packet, Publish):
                    conn.send(self._redirect_for([packet.topic]))
                    return
                else:
                    logger.debug("closing %s: unexpected %r", conn.peer, packet)
                    return
        except (ConnectionClosed, MalformedPacket, TimeoutError, OSError) as exc:
            logger.debug("client %s: %s", conn.peer, exc)
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def _answer_subscribe(self, conn: PacketConnection, sub: Subscribe) -> None:
        reasons = []
        accepted = []
        for filt in sub.filters:
            try:
                validate_filter(filt)
            except MalformedFilter:
                reasons.append(Reason.TOPIC_FILTER_NOT_ACCEPTED)
            else:
                reasons.append(Reason.SUCCESS)
                accepted.append(filt)
        conn.send(SubAck(sub.packet_id, tuple(reasons)))
        conn.send(self._redirect_for(accepted))

    def _redirect_for(self, filters: list[str]) -> Disconnect:
        """One redirect per request: the broker for the first filter we
        can place, after at most one registry rebuild.

        The target is probed before it is handed out; a broker that died
        since the last census forces the rebuild instead of bouncing the
        client against a dead address.
        """
        if not filters:
            return Disconnect(Reason.TOPIC_FILTER_NOT_ACCEPTED)
        for attempt in (False, True):
            registry = self.refresh_registry() if attempt else self.registry
            for filt in filters:
                ref = registry.find(filt)
                if ref is not None and self._alive(ref):
                    logger.info("redirecting %r to %s", filt, ref)
                    return Disconnect(Reason.USE_ANOTHER_SERVER,
                                      server_reference=ref)
        return Disconnect(Reason.TOPIC_FILTER_NOT_ACCEPTED)

    def _alive(self, ref: BrokerRef) -> bool:
        try:
            with socket.create_connection((ref.host, ref.port),
                                          timeout=self._discovery.timeout):
                return True
        except OSError:
            return False
