import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim.mq import Broker, DeliveryRefused, EndpointClosed, Envelope, Kind, QueueError


class Tick:
    def __init__(self):
        self.t = 0

    def __call__(self):
        return self.t


def env(topic, sender=1, payload=b"x", t=None, kind=Kind.UPDATE):
    return Envelope(topic, sender, kind, payload, enqueue_time=t)


def make(*participants, clock=None):
    broker = Broker(clock=clock or Tick())
    for p in participants:
        broker.register(p)
    return broker


def test_publish_without_subscribers_is_counted_and_acknowledged():
    broker = make()
    assert broker.publish("updates", env("updates")) is True
    assert broker.dropped_no_subscriber["updates"] == 1
    assert broker.published["updates"] == 1


def test_fifo_per_sender_and_topic():
    broker = make(0, 9)
    eps = [broker.subscribe("updates", 0), broker.subscribe("updates", 9)]
    broker.publish("updates", env("updates", 3, b"first"))
    broker.publish("updates", env("updates", 3, b"second"))
    for ep in eps:
        assert [ep.receive(0).payload for _ in range(2)] == [b"first", b"second"]


def test_publish_after_shutdown_refused():
    broker = make()
    broker.shutdown()
    with pytest.raises(DeliveryRefused):
        broker.publish("global", env("global"))


def test_subscribe_then_publish_delivers_but_no_replay():
    broker = make(1, 2)
    ep1 = broker.subscribe("global", 1)
    broker.publish("global", env("global", 0, b"m1"))
    ep2 = broker.subscribe("global", 2)
    assert ep1.receive(0).payload == b"m1"
    assert ep2.receive(0) is None


def test_fan_out_independent_copies():
    broker = make(1, 2)
    a, b = broker.subscribe("global", 1), broker.subscribe("global", 2)
    broker.publish("global", env("global", 0, b"m"))
    assert a.receive(0).payload == b"m" and b.receive(0).payload == b"m"
    assert a.receive(0) is None


def test_duplicate_subscription_and_unregistered_participant():
    broker = make(1)
    broker.subscribe("global", 1)
    with pytest.raises(QueueError, match="already subscribed"):
        broker.subscribe("global", 1)
    with pytest.raises(QueueError, match="not registered"):
        broker.subscribe("global", 5)


def test_empty_buffer_zero_timeout():
    broker = make(1)
    assert broker.subscribe("global", 1).receive(0) is None


def test_tie_break_by_topic_name():
    broker = make(1)
    ep = broker.subscribe("updates", 1)
    broker.subscribe("global", 1)
    broker.publish("updates", env("updates", t=1, payload=b"A"))
    broker.publish("global", env("global", t=1, payload=b"B"))
    assert ep.receive(0).payload == b"B"
    assert ep.receive(0).payload == b"A"


def test_oldest_first():
    broker = make(1)
    ep = broker.subscribe("updates", 1)
    broker.subscribe("global", 1)
    broker.publish("global", env("global", t=2, payload=b"B"))
    broker.publish("updates", env("updates", t=1, payload=b"A"))
    assert [ep.receive(0).payload for _ in range(2)] == [b"A", b"B"]


def test_closed_endpoint_is_distinguishable_from_timeout():
    broker = make(1)
    ep = broker.subscribe("global", 1)
    broker.publish("global", env("global"))
    assert ep.close() == 1
    assert broker.discarded[1] == 1
    with pytest.raises(EndpointClosed):
        ep.receive(0)


def test_blocking_receive_wakes_on_publish():
    broker = Broker()
    broker.register(1)
    ep = broker.subscribe("global", 1)
    got = []
    th = threading.Thread(target=lambda: got.append(ep.receive(5)))
    th.start()
    broker.publish("global", env("global", 0, b"wake"))
    th.join(5)
    assert got[0].payload == b"wake"


@given(
    st.lists(st.tuples(st.integers(1, 4), st.sampled_from(["global", "updates", "control"])), max_size=60),
    st.sets(st.integers(10, 13), max_size=4),
)
def test_order_and_conservation(publishes, subscribers):
    broker = make(*subscribers)
    topics = ["control", "global", "updates"]
    eps = {p: [broker.subscribe(t, p) for t in topics][0] for p in sorted(subscribers)}
    clock = broker.clock
    for i, (sender, topic) in enumerate(publishes):
        clock.t = i
        broker.publish(topic, env(topic, sender, str(i).encode()))
    for p, ep in eps.items():
        got = []
        while (e := ep.receive(0)) is not None:
            got.append(e)
        for sender in range(1, 5):
            for topic in topics:
                seq = [int(e.payload) for e in got if e.sender == sender and e.topic == topic]
                assert seq == sorted(seq)
        for topic in topics:
            assert broker.published[topic] == broker.delivered(p, topic) + broker.dropped_no_subscriber[topic]


def test_concurrent_publishers_lose_nothing():
    broker = Broker()
    broker.register(0)
    ep = broker.subscribe("updates", 0)

    def pump(sender):
        for i in range(500):
            broker.publish("updates", env("updates", sender, i.to_bytes(2, "big")))

    threads = [threading.Thread(target=pump, args=(s,)) for s in range(1, 9)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    got = []
    while (e := ep.receive(0)) is not None:
        got.append(e)
    assert len(got) == 4000
    for s in range(1, 9):
        seq = [int.from_bytes(e.payload, "big") for e in got if e.sender == s]
        assert seq == list(range(500))
