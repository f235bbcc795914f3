import numpy as np
import pytest

from ppsgcn import crypto, transport
from ppsgcn.transport import (CommLedger, InprocBus, MemoryLedger, Message,
                              Phase, SERVER, TcpBus)

Q40 = 2.0 ** -40


def fwd_messages(sizes, width, rng, iteration=0, layer=0, phase=Phase.FWD):
    """One full cross-client round: j sends an (n_i, width) term to each i."""
    m = len(sizes)
    msgs, expect = [], {i: np.zeros((sizes[i], width)) for i in range(m)}
    for j in range(m):
        for i in range(m):
            if i == j:
                continue
            t = rng.standard_normal((sizes[i], width))
            expect[i] += t
            msgs.append(Message(src=j, dest=i, phase=phase,
                                iteration=iteration, layer=layer, payload=t))
    return msgs, expect


# ---------------------------------------------------------------------------
# formulas


def test_iteration_volume_reference_instance():
    assert transport.formula_iteration(4, [128, 128, 128], 100) == 466_944


def test_param_memory_reference_instance():
    assert transport.formula_params(4, [128, 128, 128]) == 131_072


def test_activation_memory_uniform():
    assert transport.formula_activations(100, [128, 128, 128]) == 100 * 2 * 128


def test_single_client_moves_nothing():
    assert transport.formula_forward_layer(1, 50, 8) == 0
    assert transport.formula_grad_layer(1, 8, 4) == 0
    assert transport.formula_iteration(1, [8, 4, 2], 50) == 0


def test_formula_matches_closed_form_for_uniform_widths():
    m, d, n_s, L = 3, 16, 40, 2
    assert transport.formula_iteration(m, [d] * (L + 1), n_s) \
        == 2 * L * m * d * (n_s + d)


# ---------------------------------------------------------------------------
# message and ledger plumbing


def test_scalar_count_is_element_count():
    msg = Message(src=0, dest=1, phase=Phase.FWD, iteration=0, layer=0,
                  payload=np.zeros((3, 4)))
    assert msg.scalar_count == 12
    ids = Message(src=0, dest=SERVER, phase=Phase.SAMPLE_BCAST, iteration=0,
                  layer=0, payload=np.arange(5))
    assert ids.scalar_count == 5


def test_ledger_csv_roundtrip(tmp_path):
    led = CommLedger()
    led.record(Message(src=0, dest=1, phase=Phase.FWD, iteration=0, layer=1,
                       payload=np.zeros(6)))
    led.round_closed(0)
    path = tmp_path / "comm.csv"
    led.write_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iteration,phase,layer,scalars,ciphertexts,messages"
    assert lines[1] == "0,FWD,1,6,0,1"


# ---------------------------------------------------------------------------
# inproc rounds


def test_forward_round_aggregates_and_ledger():
    sizes, width = [2, 3, 4], 5
    bus = InprocBus(m=3)
    rng = np.random.default_rng(0)
    msgs, expect = fwd_messages(sizes, width, rng)
    for msg in msgs:
        bus.post(msg)
    out = bus.complete_round(Phase.FWD, 0, 0)
    for i in range(3):
        assert np.allclose(out[i], expect[i], atol=1e-12)
    t = bus.ledger.totals(0)
    assert t["scalars"] == transport.formula_forward_layer(3, sum(sizes), width)
    assert t["messages"] == 6 + 3
    assert t["rounds"] == 1


def test_gradient_round_is_an_all_reduce():
    bus = InprocBus(m=2)
    g0 = np.full((3, 4), 1.0)
    g1 = np.full((3, 4), 2.0)
    for src, g in ((0, g0), (1, g1)):
        bus.post(Message(src=src, dest=SERVER, phase=Phase.BWD_W,
                         iteration=0, layer=0, payload=g))
    out = bus.complete_round(Phase.BWD_W, 0, 0)
    assert np.allclose(out[0], g0 + g1)
    assert np.allclose(out[1], g0 + g1)
    t = bus.ledger.totals(0)
    assert t["scalars"] == transport.formula_grad_layer(2, 3, 4)


def test_sample_broadcast_relays_all_id_sets():
    bus = InprocBus(m=2)
    ids = {0: np.array([0, 2, 5]), 1: np.array([1, 4])}
    for src, v in ids.items():
        bus.post(Message(src=src, dest=SERVER, phase=Phase.SAMPLE_BCAST,
                         iteration=3, layer=0, payload=v))
    out = bus.complete_round(Phase.SAMPLE_BCAST, 3, 0)
    for dest in (0, 1):
        for src in (0, 1):
            assert np.array_equal(out[dest][src], ids[src])
    # metadata phase stays out of the volume comparison
    t = bus.ledger.totals(3, phases=(Phase.FWD, Phase.BWD_Z, Phase.BWD_W))
    assert t["scalars"] == 0


def test_single_client_round_is_empty():
    bus = InprocBus(m=1)
    out = bus.complete_round(Phase.FWD, 0, 0)
    assert out == {}
    assert bus.ledger.totals(0)["messages"] == 0


def test_duplicate_post_rejected():
    bus = InprocBus(m=2)
    msg = Message(src=0, dest=1, phase=Phase.FWD, iteration=0, layer=0,
                  payload=np.zeros(3))
    bus.post(msg)
    with pytest.raises(transport.ProtocolError, match="duplicate"):
        bus.post(msg)


def test_missing_sender_times_out():
    bus = InprocBus(m=2)
    bus.post(Message(src=0, dest=1, phase=Phase.FWD, iteration=0, layer=0,
                     payload=np.zeros(3)))
    with pytest.raises(transport.RoundTimeoutError, match="missing"):
        bus.complete_round(Phase.FWD, 0, 0)


def test_unexpected_message_rejected():
    bus = InprocBus(m=1)
    bus.post(Message(src=0, dest=0, phase=Phase.FWD, iteration=0, layer=0,
                     payload=np.zeros(3)))
    with pytest.raises(transport.ProtocolError, match="unexpected"):
        bus.complete_round(Phase.FWD, 0, 0)


def test_encrypted_bus_rejects_plaintext_matrices():
    bus = InprocBus(m=2, encrypt=True)
    with pytest.raises(transport.ProtocolError, match="plaintext"):
        bus.post(Message(src=0, dest=1, phase=Phase.FWD, iteration=0,
                         layer=0, payload=np.zeros((2, 2))))


def test_encrypted_round_end_to_end():
    kp = {i: crypto.keygen(512, seed=20 + i) for i in range(2)}
    codec = crypto.FixedPointCodec()
    bus = InprocBus(m=2, encrypt=True)
    rng = np.random.default_rng(1)
    terms = {(j, i): rng.standard_normal((3, 2))
             for j in range(2) for i in range(2) if i != j}
    for (j, i), t in terms.items():
        cm = crypto.encrypt_matrix(t, kp[i].public, codec, key_id=i)
        bus.post(Message(src=j, dest=i, phase=Phase.FWD, iteration=0,
                         layer=0, payload=cm))
    out = bus.complete_round(Phase.FWD, 0, 0)
    for i in range(2):
        got = crypto.decrypt_matrix(out[i], kp[i], codec)
        assert np.abs(got - terms[(1 - i, i)]).max() <= Q40
    t = bus.ledger.totals(0)
    assert t["ciphertexts"] == 2 * 6 + 2 * 6
    assert t["scalars"] == 0


# ---------------------------------------------------------------------------
# memory ledger and the combined check


def test_ledger_check_exact_equality():
    m, dims, sizes = 2, [3, 4, 2], [2, 2]
    n_s = sum(sizes)
    bus = InprocBus(m=m)
    rng = np.random.default_rng(2)
    for layer in range(2):
        for phase in (Phase.FWD, Phase.BWD_Z):
            msgs, _ = fwd_messages(sizes, dims[layer + 1], rng, layer=layer,
                                   phase=phase)
            for msg in msgs:
                bus.post(msg)
            bus.complete_round(phase, 0, layer)
        for src in range(m):
            bus.post(Message(src=src, dest=SERVER, phase=Phase.BWD_W,
                             iteration=0, layer=layer,
                             payload=np.zeros((dims[layer], dims[layer + 1]))))
        bus.complete_round(Phase.BWD_W, 0, layer)
    mem = MemoryLedger()
    for c in range(m):
        mem.note_params(c, 3 * 4 + 4 * 2)
        mem.note_activations(c, sizes[c] * (3 + 4))
    res = transport.ledger_check(bus.ledger, mem, m, dims, n_s)
    assert res["ok"]
    assert res["comm"]["measured"] == res["comm"]["formula"] == \
        transport.formula_iteration(m, dims, n_s)
    assert res["activation_memory"]["measured"] == n_s * (3 + 4)
    assert res["param_memory"]["measured"] == transport.formula_params(m, dims)


# ---------------------------------------------------------------------------
# tcp backend


def test_tcp_matches_inproc_on_a_forward_round():
    sizes, width = [2, 3], 4
    rng = np.random.default_rng(3)
    msgs, expect = fwd_messages(sizes, width, rng)
    inproc = InprocBus(m=2)
    tcp = TcpBus(m=2, timeout=5.0)
    try:
        for msg in msgs:
            inproc.post(msg)
            tcp.post(msg)
        out_i = inproc.complete_round(Phase.FWD, 0, 0)
        out_t = tcp.complete_round(Phase.FWD, 0, 0)
        for i in range(2):
            # geometry does not cross the wire; receivers reshape
            flat = np.asarray(out_t[i]).reshape(sizes[i], width)
            assert np.allclose(flat, out_i[i], atol=1e-12)
            assert np.allclose(out_i[i], expect[i], atol=1e-12)
        assert tcp.ledger.rows == inproc.ledger.rows
        assert tcp.ledger.rounds == inproc.ledger.rounds
    finally:
        tcp.close()


def test_tcp_preserves_round_tags_and_ids():
    tcp = TcpBus(m=2, timeout=5.0)
    try:
        ids = {0: np.array([7, 1, 3], dtype=np.int64),
               1: np.array([0, 2], dtype=np.int64)}
        for src, v in ids.items():
            tcp.post(Message(src=src, dest=SERVER, phase=Phase.SAMPLE_BCAST,
                             iteration=5, layer=0, payload=v))
        out = tcp.complete_round(Phase.SAMPLE_BCAST, 5, 0)
        for dest in (0, 1):
            for src in (0, 1):
                assert np.array_equal(out[dest][src], ids[src])
        assert (5, int(Phase.SAMPLE_BCAST), 0) in tcp.ledger.rows
    finally:
        tcp.close()


def test_tcp_gradient_all_reduce():
    tcp = TcpBus(m=3, timeout=5.0)
    try:
        gs = [np.full((2, 2), float(i + 1)) for i in range(3)]
        for src, g in enumerate(gs):
            tcp.post(Message(src=src, dest=SERVER, phase=Phase.BWD_W,
                             iteration=0, layer=1, payload=g))
        out = tcp.complete_round(Phase.BWD_W, 0, 1)
        for i in range(3):
            assert np.allclose(np.asarray(out[i]).reshape(2, 2), sum(gs))
    finally:
        tcp.close()


def test_tcp_killed_client_surfaces_timeout():
    tcp = TcpBus(m=3, timeout=0.6)
    try:
        for src in (0, 1):  # client 2 never posts
            for dest in range(3):
                if dest == src:
                    continue
                tcp.post(Message(src=src, dest=dest, phase=Phase.FWD,
                                 iteration=0, layer=0, payload=np.zeros(2)))
        with pytest.raises(transport.RoundTimeoutError):
            tcp.complete_round(Phase.FWD, 0, 0)
    finally:
        tcp.close()


def test_tcp_encrypted_round():
    kp = {i: crypto.keygen(512, seed=30 + i) for i in range(2)}
    codec = crypto.FixedPointCodec()
    pub = {i: kp[i].public for i in range(2)}
    tcp = TcpBus(m=2, encrypt=True, timeout=5.0, pubkeys=pub)
    try:
        rng = np.random.default_rng(4)
        terms = {}
        for j in range(2):
            i = 1 - j
            t = rng.standard_normal((2, 3))
            terms[i] = t
            cm = crypto.encrypt_matrix(t, pub[i], codec, key_id=i)
            tcp.post(Message(src=j, dest=i, phase=Phase.FWD, iteration=0,
                             layer=0, payload=cm))
        out = tcp.complete_round(Phase.FWD, 0, 0)
        for i in range(2):
            got = crypto.decrypt_matrix(out[i], kp[i], codec).reshape(2, 3)
            assert np.abs(got - terms[i]).max() <= Q40
        t = tcp.ledger.totals(0)
        assert t["ciphertexts"] == 4 * 6 and t["scalars"] == 0
    finally:
        tcp.close()


def test_server_state_holds_no_secret_material():
    kp = crypto.keygen(512, seed=40)
    buses = [InprocBus(m=2, encrypt=True),
             TcpBus(m=2, encrypt=True, pubkeys={0: kp.public}, timeout=2.0)]
    try:
        for bus in buses:
            assert not hasattr(bus, "decrypt")
            for v in vars(bus).values():
                assert not isinstance(v, (crypto.PaillierKeypair,
                                          crypto.PaillierSecretKey))
                if isinstance(v, dict):
                    for item in v.values():
                        assert not isinstance(item, (crypto.PaillierKeypair,
                                                     crypto.PaillierSecretKey))
    finally:
        buses[1].close()


def test_backend_factory():
    bus = transport.transport_backend("inproc", m=2)
    assert isinstance(bus, InprocBus)
    tcp = transport.transport_backend("multiprocess-tcp", m=1, timeout=2.0)
    assert isinstance(tcp, TcpBus)
    tcp.close()
    with pytest.raises(ValueError, match="unknown transport backend"):
        transport.transport_backend("carrier-pigeon", m=1)
