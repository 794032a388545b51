"""
transport_model.py

Topic-based publish/subscribe between the FL server and its clients.

Two backends share one interface:

* :py:class:`LoopbackTransport` runs every endpoint on the calling thread and
  delivers messages from an in-memory queue, so runs are deterministic.
* :py:class:`TcpTransport` talks to a :py:class:`Broker` over TCP using the
  frames from :py:mod:`fediot.models.wire_model`. This stands in for the MQTT
  server of a real deployment.

Topics look like ``fediot/<run_id>/server/<MSG_TYPE>`` and
``fediot/<run_id>/client/<client_id>/<MSG_TYPE>``. Topic filters accept the
MQTT wildcards ``+`` (one level) and ``#`` (the rest).

Delivery is at least once; receivers drop duplicates by
``(sender_id, round, msg_type)``. Within one publisher, messages on a topic
arrive in publish order.

"""

import heapq
import itertools
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, asdict

from .exception import TransportError
from .wire_model import (
    Envelope, MsgType, FRAME_LENGTH, MAX_FRAME_BYTES, encode_frame, decode_frame_body
)

logger = logging.getLogger(__name__)

TOPIC_ROOT = "fediot"
SUBSCRIBE_TOPIC = "$broker/subscribe"
DEFAULT_PORT = 1883

def server_topic(run_id, msg_type):
    return "{}/{}/server/{}".format(TOPIC_ROOT, run_id, MsgType(msg_type).name)

def client_topic(run_id, client_id, msg_type):
    return "{}/{}/client/{}/{}".format(TOPIC_ROOT, run_id, client_id, MsgType(msg_type).name)

def server_filter(run_id):
    return "{}/{}/server/#".format(TOPIC_ROOT, run_id)

def client_filter(run_id, client_id):
    return "{}/{}/client/{}/#".format(TOPIC_ROOT, run_id, client_id)

def topic_matches(topic_filter, topic):
    """
    :return: ``bool``

    ``True`` if ``topic`` matches the MQTT-style ``topic_filter``
    """
    filter_levels = topic_filter.split("/")
    topic_levels = topic.split("/")
    for i, level in enumerate(filter_levels):
        if level == "#":
            return True
        if i >= len(topic_levels):
            return False
        if level != "+" and level != topic_levels[i]:
            return False
    return len(filter_levels) == len(topic_levels)

@dataclass
class RoundMarks:
    """
    Timestamps one client collects over one round, all from
    ``time.monotonic()``. ``receipt`` is when the next global model arrived.
    ``server_seconds`` is the time the server held this client's update
    before sending the next model (aggregation plus waiting for the others).
    """
    round: int
    train_start: float
    train_end: float
    upload_start: float
    receipt: float = None
    server_seconds: float = None
    aggregation_seconds: float = None
    bytes_up: int = 0
    bytes_down: int = 0

@dataclass
class CommStats:
    bytes_up: int = 0
    bytes_down: int = 0
    comm_seconds: float = 0.0
    compute_seconds: float = 0.0
    server_seconds: float = 0.0
    per_round: list = field(default_factory=list)

    def ratios(self):
        """
        :return: ``tuple(float, float)``

        Communication and computation shares of their sum, ``(0, 0)`` if
        nothing was measured.
        """
        busy = self.comm_seconds + self.compute_seconds
        if busy <= 0:
            return 0.0, 0.0
        return self.comm_seconds / busy, self.compute_seconds / busy

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)

    @classmethod
    def combine(cls, per_client):
        """
        Run-level view: byte counters are summed over clients, seconds are
        averaged so they stay comparable with the wall time of one device.
        """
        per_client = list(per_client)
        if not per_client:
            return cls()
        n = len(per_client)
        return cls(
            bytes_up=sum(s.bytes_up for s in per_client),
            bytes_down=sum(s.bytes_down for s in per_client),
            comm_seconds=sum(s.comm_seconds for s in per_client) / n,
            compute_seconds=sum(s.compute_seconds for s in per_client) / n,
            server_seconds=sum(s.server_seconds for s in per_client) / n,
        )

def measure_round(stats, marks):
    """
    Fold one round's timestamps into ``stats``.

    Computation is the local training interval. Communication is the interval
    between starting the upload and receiving the next global model, minus
    the time the server held the update when it reports it. The held time is
    kept separately in ``server_seconds``.

    :return: ``CommStats``

    ``stats``, updated in place.

    :raises: ``ValueError``

    If the timestamps are not in order.
    """
    if marks.receipt is None:
        raise ValueError("Round {} has no receipt timestamp".format(marks.round))
    sequence = (marks.train_start, marks.train_end, marks.upload_start, marks.receipt)
    if any(later < earlier for earlier, later in zip(sequence, sequence[1:])):
        raise ValueError("Round {} timestamps are not monotonic: {}".format(marks.round, sequence))

    compute = marks.train_end - marks.train_start
    held = marks.server_seconds or 0.0
    comm = max(0.0, (marks.receipt - marks.upload_start) - held)
    stats.compute_seconds += compute
    stats.comm_seconds += comm
    stats.server_seconds += held
    stats.bytes_up += marks.bytes_up
    stats.bytes_down += marks.bytes_down
    stats.per_round.append({
        "round": marks.round, "compute_seconds": compute, "comm_seconds": comm,
        "server_seconds": held, "aggregation_seconds": marks.aggregation_seconds or 0.0,
        "bytes_up": marks.bytes_up, "bytes_down": marks.bytes_down,
    })
    return stats

class Backend:
    """
    One endpoint on the bus. Handlers run on the thread that calls
    :py:meth:`poll` (loopback: the thread that drives the transport).
    """

    def __init__(self, name):
        self.name = name
        self.bytes_sent = 0
        self.bytes_received = 0
        self._handlers = []

    def subscribe(self, topic_filter, handler):
        raise NotImplementedError

    def publish(self, envelope):
        raise NotImplementedError

    def poll(self, timeout=0.0):
        return 0

    def close(self):
        pass

    def _dispatch(self, envelope):
        delivered = 0
        for topic_filter, handler in list(self._handlers):
            if topic_matches(topic_filter, envelope.topic):
                handler(envelope)
                delivered += 1
        return delivered

class Transport:
    """
    Hands out endpoints and drives a set of managers until they finish. A
    manager exposes ``start()``, ``tick(now)``, ``finished`` and
    ``diagnose()``, and owns a ``backend``.
    """

    def endpoint(self, name, priority=1):
        raise NotImplementedError

    def run(self, managers):
        raise NotImplementedError

class LoopbackBackend(Backend):

    def __init__(self, bus, name, priority):
        Backend.__init__(self, name)
        self.bus = bus
        self.priority = priority

    def subscribe(self, topic_filter, handler):
        if not topic_filter:
            raise TransportError("Cannot subscribe to an empty topic filter")
        self._handlers.append((topic_filter, handler))
        self.bus.subscriptions.append((topic_filter, self, handler))

    def publish(self, envelope):
        self.bus.publish(self, envelope)

class LoopbackTransport(Transport):
    """
    In-process bus. Pending deliveries are ordered by endpoint priority and
    then publish order, so a server endpoint (priority 0) handles uploads as
    soon as they are made.

    ``latency`` injects a delay before every delivery. A delivered envelope
    gets ``received_at = sent_at + its own publish and delivery cost``, so
    the time it sat queued behind other in-process endpoints is not counted
    as communication.

    :kwarg latency: float

    Seconds of injected delay per delivered message.
    """

    def __init__(self, latency=0.0):
        self.latency = latency
        self.subscriptions = []
        self.endpoints = []
        self.delivered_bytes = {}
        self.delivered_counts = {}
        self._pending = []
        self._sequence = itertools.count()

    def endpoint(self, name, priority=1):
        backend = LoopbackBackend(self, name, priority)
        self.endpoints.append(backend)
        return backend

    def publish(self, sender, envelope):
        started = time.monotonic()
        frame = encode_frame(envelope)
        sender.bytes_sent += len(frame)
        publish_cost = time.monotonic() - started
        targets = [
            (endpoint, handler) for topic_filter, endpoint, handler in self.subscriptions
            if topic_matches(topic_filter, envelope.topic)
        ]
        if not targets:
            logger.debug("No subscribers for %s, dropping", envelope.topic)
        for endpoint, handler in targets:
            heapq.heappush(self._pending, (
                endpoint.priority, next(self._sequence), endpoint, handler, frame,
                started, publish_cost
            ))

    def pending(self):
        return len(self._pending)

    def deliver_next(self):
        """
        Deliver the next pending message.

        :return: ``bool``

        ``False`` if nothing was pending.
        """
        if not self._pending:
            return False
        _, _, endpoint, handler, frame, sent_at, publish_cost = heapq.heappop(self._pending)
        started = time.monotonic()
        if self.latency > 0:
            time.sleep(self.latency)
        envelope = decode_frame_body(frame[FRAME_LENGTH.size:])
        endpoint.bytes_received += len(frame)
        self.delivered_bytes[envelope.msg_type] = \
            self.delivered_bytes.get(envelope.msg_type, 0) + len(frame)
        self.delivered_counts[envelope.msg_type] = \
            self.delivered_counts.get(envelope.msg_type, 0) + 1
        envelope.sent_at = sent_at
        envelope.received_at = sent_at + publish_cost + (time.monotonic() - started)
        handler(envelope)
        return True

    def run(self, managers):
        """
        Start every manager (in order) and deliver messages until all of them
        finish.

        :raises: ``TransportError``

        If the queue drains while some manager is still waiting.
        """
        for manager in managers:
            manager.start()
        while not all(m.finished for m in managers):
            if not self.deliver_next():
                stalled = "; ".join(m.diagnose() for m in managers if not m.finished)
                raise TransportError("Run stalled with no pending messages: {}".format(stalled))

def _recv_exact(sock, n_bytes):
    chunks, remaining = [], n_bytes
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)

def read_frame(sock):
    """
    :return: ``bytes`` or ``None``

    One complete frame (including its length prefix), or ``None`` when the
    peer closed the connection.

    :raises: ``TransportError``

    If the declared length is absurd.
    """
    prefix = _recv_exact(sock, FRAME_LENGTH.size)
    if prefix is None:
        return None
    (length,) = FRAME_LENGTH.unpack(prefix)
    if length > MAX_FRAME_BYTES:
        raise TransportError("Frame of {} bytes exceeds the {} byte limit".format(
            length, MAX_FRAME_BYTES
        ))
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return prefix + body

class _BrokerConnection:

    def __init__(self, sock, address):
        self.sock = sock
        self.address = address
        self.send_lock = threading.Lock()

    def send(self, frame):
        with self.send_lock:
            self.sock.sendall(frame)

class Broker:
    """
    A minimal topic router. Each connection gets a reader thread; frames are
    forwarded unchanged to every connection with a matching subscription.

    :kwarg host: str

    :kwarg port: int

    ``0`` picks a free port, see :py:attr:`address`.

    :kwarg exit_when_idle: bool

    If set, the broker stops once it has routed a DONE message and every
    connection has closed.
    """

    def __init__(self, host="127.0.0.1", port=DEFAULT_PORT, exit_when_idle=False):
        self.host = host
        self.port = port
        self.exit_when_idle = exit_when_idle
        self._server = None
        self._stopped = threading.Event()
        self._lock = threading.Lock()
        self._subscriptions = []
        self._connections = set()
        self._saw_done = False
        self._threads = []
        self._accept_thread = None

    @property
    def address(self):
        return self._server.getsockname()[:2]

    def start(self):
        """
        Bind, listen and accept connections on a background thread.

        :raises: ``TransportError``

        If the address cannot be bound.
        """
        try:
            self._server = socket.create_server((self.host, self.port), reuse_port=False)
        except OSError as e:
            raise TransportError("Cannot listen on {}:{}: {}".format(self.host, self.port, e))
        self._server.settimeout(0.2)
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="broker-accept", daemon=True
        )
        self._accept_thread.start()
        logger.info("Broker listening on %s:%d", *self.address)
        return self

    def serve_forever(self):
        while not self._stopped.wait(0.2):
            pass

    def stop(self):
        """
        Stop accepting, drop every connection and wait for the accept thread.
        No connection is accepted once this returns.
        """
        self._stopped.set()
        if self._server is not None:
            try:
                self._server.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        accept_thread = self._accept_thread
        if accept_thread is not None and accept_thread is not threading.current_thread():
            accept_thread.join()
        with self._lock:
            connections = list(self._connections)
        for connection in connections:
            try:
                connection.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            connection.sock.close()
        if self._server is not None:
            self._server.close()

    @property
    def stopped(self):
        return self._stopped.is_set()

    def subscription_count(self):
        with self._lock:
            return len(self._subscriptions)

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                sock, address = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            if self._stopped.is_set():
                sock.close()
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            connection = _BrokerConnection(sock, address)
            with self._lock:
                self._connections.add(connection)
            thread = threading.Thread(
                target=self._serve, args=(connection,), name="broker-conn", daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _serve(self, connection):
        logger.debug("Broker: connection from %s", connection.address)
        try:
            while not self._stopped.is_set():
                frame = read_frame(connection.sock)
                if frame is None:
                    break
                envelope = decode_frame_body(frame[FRAME_LENGTH.size:])
                if envelope.msg_type == MsgType.SUBSCRIBE:
                    with self._lock:
                        self._subscriptions.append((envelope.payload.decode("utf-8"), connection))
                    continue
                self._route(envelope, frame)
        except (OSError, TransportError) as e:
            logger.debug("Broker: connection %s dropped: %s", connection.address, e)
        finally:
            with self._lock:
                self._connections.discard(connection)
                self._subscriptions = [s for s in self._subscriptions if s[1] is not connection]
                idle = self.exit_when_idle and self._saw_done and not self._connections
            connection.sock.close()
            if idle:
                logger.info("Broker: run finished and all clients left, stopping")
                self._stopped.set()

    def _route(self, envelope, frame):
        with self._lock:
            targets = []
            for topic_filter, connection in self._subscriptions:
                if connection not in targets and topic_matches(topic_filter, envelope.topic):
                    targets.append(connection)
            if envelope.msg_type == MsgType.DONE:
                self._saw_done = True
        for connection in targets:
            try:
                connection.send(frame)
            except OSError as e:
                logger.debug("Broker: cannot forward to %s: %s", connection.address, e)

class TcpBackend(Backend):
    """
    Client side of the broker connection. A reader thread queues incoming
    envelopes; :py:meth:`poll` hands them to the subscribed handlers.

    :kwarg max_retries: int

    Connection attempts before giving up.

    :kwarg backoff: float

    First retry delay in seconds; doubles per attempt up to ``max_backoff``.
    """

    def __init__(self, name, host, port, max_retries=6, backoff=0.1, max_backoff=2.0):
        Backend.__init__(self, name)
        self.host = host
        self.port = port
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._inbox = queue.Queue()
        self._send_lock = threading.Lock()
        self._closing = threading.Event()
        self._sock = None
        self._connect()

    def _connect(self):
        delay = self.backoff
        for attempt in range(1, self.max_retries + 1):
            try:
                sock = socket.create_connection((self.host, self.port), timeout=5.0)
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                break
            except OSError as e:
                logger.warning(
                    "%s: broker %s:%d unreachable (attempt %d/%d): %s",
                    self.name, self.host, self.port, attempt, self.max_retries, e
                )
                if attempt == self.max_retries:
                    raise TransportError("Broker at {}:{} unreachable after {} attempts".format(
                        self.host, self.port, self.max_retries
                    ))
                time.sleep(delay)
                delay = min(delay * 2, self.max_backoff)
        self._sock = sock
        for topic_filter, _ in self._handlers:
            self._send_subscribe(topic_filter)
        reader = threading.Thread(
            target=self._read_loop, args=(sock,), name="{}-reader".format(self.name), daemon=True
        )
        reader.start()

    def _read_loop(self, sock):
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    break
                received_at = time.monotonic()
                envelope = decode_frame_body(frame[FRAME_LENGTH.size:])
                envelope.received_at = received_at
                self.bytes_received += len(frame)
                self._inbox.put(envelope)
        except (OSError, TransportError) as e:
            if not self._closing.is_set():
                logger.warning("%s: connection to broker lost: %s", self.name, e)

    def _send(self, frame):
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as e:
                if self._closing.is_set():
                    raise TransportError("{} is closed".format(self.name))
                logger.warning("%s: send failed (%s), reconnecting", self.name, e)
                self._sock.close()
                self._connect()
                self._sock.sendall(frame)

    def _send_subscribe(self, topic_filter):
        frame = encode_frame(Envelope(
            topic=SUBSCRIBE_TOPIC, msg_type=MsgType.SUBSCRIBE, round=0, sender_id=self.name,
            payload=topic_filter.encode("utf-8")
        ))
        self._sock.sendall(frame)

    def subscribe(self, topic_filter, handler):
        if not topic_filter:
            raise TransportError("Cannot subscribe to an empty topic filter")
        self._handlers.append((topic_filter, handler))
        with self._send_lock:
            self._send_subscribe(topic_filter)

    def publish(self, envelope):
        envelope.sent_at = time.monotonic()
        frame = encode_frame(envelope)
        self._send(frame)
        self.bytes_sent += len(frame)

    def poll(self, timeout=0.0):
        """
        Dispatch every queued envelope, waiting up to ``timeout`` seconds for
        the first one.

        :return: ``int``

        Number of envelopes dispatched.
        """
        dispatched = 0
        try:
            envelope = self._inbox.get(timeout=timeout) if timeout else self._inbox.get_nowait()
        except queue.Empty:
            return 0
        while True:
            self._dispatch(envelope)
            dispatched += 1
            try:
                envelope = self._inbox.get_nowait()
            except queue.Empty:
                return dispatched

    def close(self):
        self._closing.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

class TcpTransport(Transport):
    """
    Connects every endpoint to a broker and drives each manager on its own
    thread.

    :param host: str

    :param port: int

    """

    def __init__(self, host, port, max_retries=6, backoff=0.1, poll_interval=0.05):
        self.host = host
        self.port = port
        self.max_retries = max_retries
        self.backoff = backoff
        self.poll_interval = poll_interval

    def endpoint(self, name, priority=1):
        return TcpBackend(
            name, self.host, self.port, max_retries=self.max_retries, backoff=self.backoff
        )

    def drive(self, manager, abort=None, start=True):
        """
        Run one manager to completion on the calling thread.
        """
        abort = abort or threading.Event()
        if start:
            manager.start()
        while not manager.finished and not abort.is_set():
            manager.backend.poll(self.poll_interval)
            manager.tick(time.monotonic())

    def run(self, managers):
        """
        :raises: ``FedIoTException``

        The first error raised by any manager; the others are stopped.
        """
        abort = threading.Event()
        errors = []

        def target(manager):
            try:
                self.drive(manager, abort, start=False)
            except Exception as e:
                errors.append(e)
                abort.set()

        for manager in managers:
            manager.start()
        threads = [
            threading.Thread(target=target, args=(m,), name=m.backend.name, daemon=True)
            for m in managers
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        for manager in managers:
            manager.backend.close()
        if errors:
            raise errors[0]
