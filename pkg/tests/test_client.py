"""Transparent subscriber sessions and the publish helpers."""

import threading
import time

import pytest

from helpers import SilentBroker, wait_until
from tdmqtt.client import (
    SessionState,
    SubscriberSession,
    publish,
    transparent_publish,
    transparent_subscribe,
)
from tdmqtt.errors import (
    BrokerUnreachable,
    MasterUnreachable,
    NoSuchTopic,
    Redirected,
)
from tdmqtt.packets import BrokerRef, MalformedFilter


class Sink:
    def __init__(self):
        self.messages = []
        self._got = threading.Event()

    def __call__(self, packet):
        self.messages.append(packet)
        self._got.set()

    def payloads(self):
        return [m.payload for m in self.messages]

    def wait(self, n=1, timeout=5.0):
        wait_until(lambda: len(self.messages) >= n, timeout)
        return self.messages


@pytest.fixture
def sink():
    return Sink()


@pytest.fixture
def sessions():
    opened = []
    yield opened
    for session in opened:
        session.close()


def addresses(upto):
    return tuple(f"127.0.0.{i}" for i in range(1, upto + 1))


def open_session(sessions, master, topic, sink, **kwargs):
    kwargs.setdefault("keepalive", 2.0)
    kwargs.setdefault("timeout", 2.0)
    session = transparent_subscribe(master.address, topic, sink, **kwargs)
    sessions.append(session)
    return session


def test_subscribe_knowing_only_the_master(make_fleet, make_master, sink,
                                           sessions):
    brokers, port = make_fleet(2)
    publish(brokers[1].address, "sensors/room1", b"initial")
    master = make_master(addresses(3), port)

    session = open_session(sessions, master, "sensors/room1", sink)
    assert session.broker == brokers[1].address
    assert session.state is SessionState.SUBSCRIBED

    # the broker replays the last message on attach, then routes new ones
    assert sink.wait(1)[0].payload == b"initial"
    publish(brokers[1].address, "sensors/room1", b"fresh")
    assert sink.wait(2)[1].payload == b"fresh"

    kinds = [kind for kind, _ in session.events()]
    assert kinds[:3] == ["resolve", "redirect", "attach"]


def test_unknown_topic_raises_before_returning(make_fleet, make_master, sink,
                                               sessions):
    _, port = make_fleet(1)
    master = make_master(addresses(2), port)
    with pytest.raises(NoSuchTopic):
        open_session(sessions, master, "never/published", sink)


def test_dead_master_raises(sink, sessions):
    from conftest import free_port
    dead = BrokerRef("127.0.0.1", free_port())

    class FakeMaster:
        address = dead

    with pytest.raises(MasterUnreachable):
        open_session(sessions, FakeMaster, "t", sink, timeout=0.5)


def test_bad_filter_rejected_without_any_network(sink):
    with pytest.raises(MalformedFilter):
        transparent_subscribe(BrokerRef("127.0.0.1", 1), "a/+/b", sink)


def test_failover_to_surviving_broker(make_fleet, make_master, sink, sessions):
    brokers, port = make_fleet(2)
    publish(brokers[0].address, "t/failover", b"v1")
    master = make_master(addresses(3), port)
    session = open_session(sessions, master, "t/failover", sink,
                           keepalive=1.0, timeout=1.0)
    assert session.broker == brokers[0].address
    sink.wait(1)

    # the topic's publisher moves to the second broker, then the first dies
    publish(brokers[1].address, "t/failover", b"v2")
    brokers[0].stop()

    wait_until(lambda: session.broker == brokers[1].address, timeout=8)
    assert session.state is SessionState.SUBSCRIBED
    publish(brokers[1].address, "t/failover", b"v3")
    wait_until(lambda: b"v3" in sink.payloads(), timeout=5)
    kinds = [kind for kind, _ in session.events()]
    assert "lost" in kinds


def test_relocation_with_target_bypasses_the_master(make_fleet, make_master,
                                                    sink, sessions):
    brokers, port = make_fleet(2)
    publish(brokers[0].address, "mv/t", b"v1")
    master = make_master(addresses(3), port)
    session = open_session(sessions, master, "mv/t", sink)
    sink.wait(1)
    consults_before = master.connection_count

    brokers[0].relocate_topic("mv/t", brokers[1].address)
    wait_until(lambda: session.broker == brokers[1].address, timeout=5)

    assert master.connection_count == consults_before  # went direct
    publish(brokers[1].address, "mv/t", b"v2")
    wait_until(lambda: b"v2" in sink.payloads(), timeout=5)
    kinds = [kind for kind, _ in session.events()]
    assert "moved" in kinds and "resolve" in kinds[:1]


def test_relocation_without_target_goes_back_to_master(make_fleet, make_master,
                                                       sink, sessions):
    brokers, port = make_fleet(2)
    publish(brokers[0].address, "mv/u", b"v1")
    master = make_master(addresses(3), port, refresh_period=0.4)
    session = open_session(sessions, master, "mv/u", sink)
    sink.wait(1)
    consults_before = master.connection_count

    # the publisher has already moved house; the old broker only knows
    # the topic is gone, not where to
    publish(brokers[1].address, "mv/u", b"v2")
    brokers[0].relocate_topic("mv/u", None)

    wait_until(lambda: session.broker == brokers[1].address, timeout=10)
    assert master.connection_count > consults_before  # had to ask
    publish(brokers[1].address, "mv/u", b"v3")
    wait_until(lambda: b"v3" in sink.payloads(), timeout=5)


def test_relocation_chain_is_followed(make_fleet, make_master, sink, sessions):
    brokers, port = make_fleet(3)
    publish(brokers[0].address, "hop", b"v1")
    master = make_master(addresses(4), port)
    session = open_session(sessions, master, "hop", sink)
    brokers[0].relocate_topic("hop", brokers[1].address)
    wait_until(lambda: session.broker == brokers[1].address, timeout=5)
    brokers[1].relocate_topic("hop", brokers[2].address)
    wait_until(lambda: session.broker == brokers[2].address, timeout=5)
    assert session.state is SessionState.SUBSCRIBED


def test_unresponsive_broker_detected_by_ping_probe(make_fleet, make_master,
                                                    sink, sessions):
    # a broker that freezes without closing its sockets: only the missing
    # ping replies give it away
    stalled = SilentBroker(topics=("frozen/t",))
    brokers, port = make_fleet(1)
    publish(brokers[0].address, "frozen/t", b"vnew")
    master = make_master(addresses(2), port)
    try:
        session = SubscriberSession(master.address, "frozen/t", sink,
                                    keepalive=0.4, timeout=0.4)
        conn = session._attach(stalled.address)
        session._start_thread(conn)
        sessions.append(session)

        started = time.monotonic()
        wait_until(lambda: session.broker == brokers[0].address, timeout=8)
        elapsed = time.monotonic() - started
        # detection needs one quiet keepalive interval plus the probe wait
        assert elapsed < 6.0
        kinds = [kind for kind, _ in session.events()]
        assert "lost" in kinds
        assert session.state is SessionState.SUBSCRIBED
    finally:
        stalled.stop()


def test_close_is_idempotent_and_final(make_fleet, make_master, sink, sessions):
    brokers, port = make_fleet(1)
    publish(brokers[0].address, "c", b"v")
    master = make_master(addresses(2), port)
    session = open_session(sessions, master, "c", sink)
    session.close()
    session.close()
    assert session.state is SessionState.CLOSED
    # no reconnect attempts after close
    events_after = session.events()
    time.sleep(0.3)
    assert session.events() == events_after


# --- publish helpers ---------------------------------------------------------

def test_publish_qos1_roundtrip(make_fleet, sink):
    brokers, _ = make_fleet(1)
    publish(brokers[0].address, "q1", b"v", qos=1)
    assert "q1" in brokers[0].topics()


def test_publish_to_dead_broker(make_fleet):
    _, port = make_fleet(0)
    with pytest.raises(BrokerUnreachable):
        publish(BrokerRef("127.0.0.1", port), "t", b"v", timeout=0.5)


def test_publish_to_relocated_topic_raises_redirected(make_fleet):
    brokers, _ = make_fleet(2)
    brokers[0].relocate_topic("moved/known", brokers[1].address)
    brokers[0].relocate_topic("moved/unknown", None)

    with pytest.raises(Redirected) as info:
        publish(brokers[0].address, "moved/known", b"v", qos=1)
    assert info.value.reference == brokers[1].address

    with pytest.raises(Redirected) as info:
        publish(brokers[0].address, "moved/unknown", b"v")  # qos0 bounce
    assert info.value.reference is None


def test_transparent_publish_lands_on_the_right_broker(make_fleet,
                                                       make_master):
    brokers, port = make_fleet(2)
    publish(brokers[1].address, "tp", b"seed")
    master = make_master(addresses(3), port)
    target = transparent_publish(master.address, "tp", b"routed")
    assert target == brokers[1].address
    conn_topics = brokers[1].topics()
    assert "tp" in conn_topics


def test_transparent_publish_unknown_topic(make_fleet, make_master):
    _, port = make_fleet(1)
    master = make_master(addresses(2), port)
    with pytest.raises(NoSuchTopic):
        transparent_publish(master.address, "tp/none", b"v")
