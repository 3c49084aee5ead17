"""
Peer transports for model exchange. Both variants carry encoded protocol
frames and feed the same per-round Inbox, so the learning computation cannot
tell them apart:

* TcpTransport: real sockets. A node dials every neighbor with a higher id and
  accepts connections from every neighbor with a lower id; the dialer opens
  with HELLO. One reader thread per connection buffers incoming MODEL frames.
* MemoryTransport: frames are handed over in-process through a MemoryHub.
"""

import logging
import socket
import threading
import time
from collections import defaultdict

from . import constants
from .errors import (
    NeighborTimeoutError,
    PeerClosedError,
    ProtocolError,
    TopologyError,
)
from .protocol import Bye, Hello, Model, decode_frame_bytes, encode_frame, read_frame

logger = logging.getLogger(__name__)


class TrafficCounters:
    """Bytes moved by one node. Model traffic and control traffic are kept apart."""

    def __init__(self):
        self._lock = threading.Lock()
        self.model_sent = 0
        self.model_recv = 0
        self.control_sent = 0
        self.control_recv = 0

    def add(self, name, count):
        with self._lock:
            setattr(self, name, getattr(self, name) + count)

    def snapshot(self):
        with self._lock:
            return {
                "model_sent": self.model_sent,
                "model_recv": self.model_recv,
                "control_sent": self.control_sent,
                "control_recv": self.control_recv,
            }


class Inbox:
    """
    Round barrier buffer: round -> sender -> parameter payload. Models for
    future rounds are buffered; models for rounds already consumed, or beyond
    the last round, poison the inbox with a ProtocolError.
    """

    def __init__(self, rounds=None):
        self.rounds = rounds
        self._cond = threading.Condition()
        self._pending = defaultdict(dict)
        self._next_round = 0
        self._failure = None

    def put(self, round_index, sender, payload):
        with self._cond:
            if round_index < self._next_round or (
                self.rounds is not None and round_index >= self.rounds
            ):
                self._failure = ProtocolError(
                    f"node {sender} sent a model for round {round_index}, "
                    f"expected round >= {self._next_round}"
                )
            elif sender in self._pending[round_index]:
                self._failure = ProtocolError(
                    f"node {sender} sent two models for round {round_index}"
                )
            else:
                self._pending[round_index][sender] = payload
            self._cond.notify_all()

    def fail(self, error):
        with self._cond:
            if self._failure is None:
                self._failure = error
            self._cond.notify_all()

    def take_round(self, round_index, expected, timeout_s):
        """Blocks until every id in `expected` delivered round `round_index`."""
        expected = set(expected)
        deadline = time.monotonic() + timeout_s
        with self._cond:
            while True:
                if self._failure is not None:
                    raise self._failure
                have = self._pending.get(round_index, {})
                if expected <= set(have):
                    self._pending.pop(round_index, None)
                    self._next_round = round_index + 1
                    return {sender: have[sender] for sender in sorted(expected)}
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise NeighborTimeoutError(round_index, expected - set(have))
                self._cond.wait(remaining)

    def buffered_rounds(self):
        with self._cond:
            return sorted(r for r, senders in self._pending.items() if senders)


class PeerGroup:
    """The connections of one node to its neighbors."""

    def __init__(self, node_id, neighbor_ids, inbox, counters):
        self.node_id = node_id
        self.neighbor_ids = sorted(neighbor_ids)
        self.inbox = inbox
        self.counters = counters

    def send_model(self, round_index, payload):
        """Sends one MODEL frame to every neighbor; returns the bytes written."""
        frame = encode_frame(Model(round=round_index, node_id=self.node_id, payload=payload))
        for neighbor in self.neighbor_ids:
            self._send(neighbor, frame)
            self.counters.add("model_sent", len(frame))
        return len(frame) * len(self.neighbor_ids)

    def _send(self, neighbor, frame):
        raise NotImplementedError

    def close(self, timeout_s=None):
        pass


# In-memory


class MemoryHub:
    """Pre-registers an Inbox and counters for every node of a simulated federation."""

    def __init__(self, n_nodes, rounds=None):
        self.inboxes = {node_id: Inbox(rounds) for node_id in range(n_nodes)}
        self.counters = {node_id: TrafficCounters() for node_id in range(n_nodes)}

    def deliver(self, receiver, frame):
        msg, consumed = decode_frame_bytes(frame)
        if isinstance(msg, Model):
            self.counters[receiver].add("model_recv", consumed)
            self.inboxes[receiver].put(msg.round, msg.node_id, msg.payload)
        else:
            self.counters[receiver].add("control_recv", consumed)


class MemoryPeerGroup(PeerGroup):
    def __init__(self, node_id, neighbor_ids, hub):
        super().__init__(node_id, neighbor_ids, hub.inboxes[node_id], hub.counters[node_id])
        self.hub = hub

    def _send(self, neighbor, frame):
        self.hub.deliver(neighbor, frame)


class MemoryTransport:
    def __init__(self, hub):
        self.hub = hub

    def connect(self, node_id, neighbor_ids, connect_timeout_s=None):
        for neighbor in neighbor_ids:
            if neighbor not in self.hub.inboxes:
                raise TopologyError(f"node {neighbor} is not registered with the hub")
        return MemoryPeerGroup(node_id, neighbor_ids, self.hub)


# TCP


class PeerListener:
    """Listening socket bound up front so its port is known before any node dials."""

    def __init__(self, host, port):
        self.host = host
        self.sock = socket.create_server((host, port), backlog=64)
        self.port = self.sock.getsockname()[1]

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class _Connection:
    def __init__(self, peer_id, sock, stream):
        self.peer_id = peer_id
        self.sock = sock
        self.stream = stream
        self.send_lock = threading.Lock()
        self.reader = None

    def close(self):
        for closable in (self.stream, self.sock):
            try:
                closable.close()
            except OSError:
                pass


class TcpPeerGroup(PeerGroup):
    def __init__(self, node_id, connections, inbox, counters, listener):
        super().__init__(node_id, list(connections), inbox, counters)
        self._connections = connections
        self._listener = listener
        for connection in connections.values():
            connection.reader = threading.Thread(
                target=self._read_loop,
                args=(connection,),
                name=f"peer-reader-{node_id}-{connection.peer_id}",
                daemon=True,
            )
            connection.reader.start()

    def _send(self, neighbor, frame):
        connection = self._connections[neighbor]
        with connection.send_lock:
            connection.sock.sendall(frame)

    def _read_loop(self, connection):
        while True:
            try:
                msg, nbytes = read_frame(connection.stream)
            except PeerClosedError:
                return
            except (ProtocolError, OSError) as e:
                logger.warning(
                    "peer read failed node=%d peer=%d error=%s",
                    self.node_id,
                    connection.peer_id,
                    e,
                )
                self.inbox.fail(e if isinstance(e, ProtocolError) else ProtocolError(str(e)))
                return
            if isinstance(msg, Model):
                if msg.node_id != connection.peer_id:
                    self.inbox.fail(
                        ProtocolError(
                            f"connection to node {connection.peer_id} carried a model "
                            f"from node {msg.node_id}"
                        )
                    )
                    return
                self.counters.add("model_recv", nbytes)
                self.inbox.put(msg.round, msg.node_id, msg.payload)
            elif isinstance(msg, Bye):
                self.counters.add("control_recv", nbytes)
                return
            else:
                self.inbox.fail(ProtocolError(f"unexpected {type(msg).__name__} mid-session"))
                return

    def close(self, timeout_s=None):
        """Says BYE, half-closes, waits for each peer to finish, then closes."""
        timeout_s = constants.DEFAULT_NEIGHBOR_TIMEOUT_S if timeout_s is None else timeout_s
        bye = encode_frame(Bye())
        for connection in self._connections.values():
            try:
                with connection.send_lock:
                    connection.sock.sendall(bye)
                self.counters.add("control_sent", len(bye))
                connection.sock.shutdown(socket.SHUT_WR)
            except OSError as e:
                logger.debug("bye failed node=%d peer=%d error=%s", self.node_id, connection.peer_id, e)
        deadline = time.monotonic() + timeout_s
        for connection in self._connections.values():
            if connection.reader is not None:
                connection.reader.join(max(deadline - time.monotonic(), 0.0))
            connection.close()
        if self._listener is not None:
            self._listener.close()


class TcpTransport:
    """
    Connects a node to its neighbors over TCP.

    `directory` maps node id to the (host, port) of its peer listener;
    `listener` is this node's own, already bound PeerListener.
    """

    def __init__(self, directory, listener, rounds=None):
        self.directory = dict(directory)
        self.listener = listener
        self.rounds = rounds

    def connect(self, node_id, neighbor_ids, connect_timeout_s=constants.DEFAULT_CONNECT_TIMEOUT_S):
        inbox = Inbox(self.rounds)
        counters = TrafficCounters()
        deadline = time.monotonic() + connect_timeout_s
        to_accept = {n for n in neighbor_ids if n < node_id}
        to_dial = sorted(n for n in neighbor_ids if n > node_id)

        accepted = {}
        accept_error = []
        acceptor = threading.Thread(
            target=self._accept_all,
            args=(node_id, to_accept, deadline, accepted, accept_error, counters),
            name=f"peer-accept-{node_id}",
            daemon=True,
        )
        acceptor.start()

        connections = {}
        try:
            try:
                for neighbor in to_dial:
                    connections[neighbor] = self._dial(node_id, neighbor, deadline, counters)
            finally:
                acceptor.join(max(deadline - time.monotonic(), 0.0) + 1.0)
            if accept_error:
                raise accept_error[0]
            missing = to_accept - set(accepted)
            if missing:
                raise NeighborTimeoutError(-1, missing)
            connections.update(accepted)
            for connection in connections.values():
                connection.sock.settimeout(None)
        except BaseException:
            # Closing the listener also ends an acceptor still waiting in accept().
            self.listener.close()
            acceptor.join(1.0)
            for connection in [*connections.values(), *list(accepted.values())]:
                connection.close()
            raise
        logger.info("peers connected node=%d neighbors=%s", node_id, sorted(connections))
        return TcpPeerGroup(node_id, connections, inbox, counters, self.listener)

    def _dial(self, node_id, neighbor, deadline, counters):
        host, port = self.directory[neighbor]
        hello = encode_frame(Hello(node_id=node_id))
        last_error = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection((host, port), timeout=5.0)
            except OSError as e:
                last_error = e
                time.sleep(0.05)
                continue
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(hello)
            except OSError as e:
                sock.close()
                last_error = e
                time.sleep(0.05)
                continue
            counters.add("control_sent", len(hello))
            return _Connection(neighbor, sock, sock.makefile("rb"))
        raise NeighborTimeoutError(-1, [neighbor]) from last_error

    def _accept_all(self, node_id, expected, deadline, accepted, errors, counters):
        server = self.listener.sock
        try:
            while set(accepted) != expected:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return
                server.settimeout(min(remaining, 0.5))
                try:
                    sock, _ = server.accept()
                except socket.timeout:
                    continue
                sock.settimeout(max(deadline - time.monotonic(), 0.1))
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                connection = _Connection(None, sock, sock.makefile("rb"))
                try:
                    msg, nbytes = read_frame(connection.stream)
                except BaseException:
                    connection.close()
                    raise
                if not isinstance(msg, Hello) or msg.node_id not in expected:
                    connection.close()
                    raise ProtocolError(f"node {node_id} got an unexpected opening {msg!r}")
                counters.add("control_recv", nbytes)
                connection.peer_id = msg.node_id
                accepted[msg.node_id] = connection
        except (ProtocolError, OSError) as e:
            errors.append(e if isinstance(e, ProtocolError) else ProtocolError(str(e)))
