import random
from fractions import Fraction

import pytest

from vmcheck.machine import (
    MachineState,
    NotPresent,
    Reg,
    split_va,
    synth_tables,
    walk,
)
from vmcheck.assertions import FULL, L4L1PointsTo, PtePt, SumExceedsOne, VirtPt
from vmcheck.ghost import (
    AlreadyMapped,
    EvidenceInvalid,
    InsufficientToken,
    UnknownRoot,
    ghost_insert_walk,
    ghost_remove_walk,
    ias_check,
    pte_to_virt,
    register_space,
    token_join,
    token_split,
    virt_to_pte,
)

from gen import multi_space_fixture


def fixture():
    state, registry, roots = multi_space_fixture()
    return state, registry, roots[0]


def chain_for(state, root, va):
    trace = walk(root, state.mem, va)
    assert trace.ok
    l4, l3, l2, l1 = (s[3].raw for s in trace.steps)
    return L4L1PointsTo(va, l4, l3, l2, l1, trace.result.byte)


# --------------------------------------------------------------------------
# ias_check


def test_ias_check_empty_theta():
    state, registry, roots = multi_space_fixture()
    assert ias_check(state, roots[2], registry) == []


def test_ias_check_synthesized_tables():
    state, registry, root = fixture()
    assert ias_check(state, root, registry) == []


def test_ias_check_unknown_root():
    state, registry, _root = fixture()
    with pytest.raises(UnknownRoot):
        ias_check(state, 0xFE000, registry)


def test_ias_check_reports_exact_victims():
    # Clearing one L3 entry breaks exactly the vas routed through it.
    mappings = [(0x20_0000, 0x5000, True), (0x20_1000, 0x6000, True),
                ((1 << 30) | 0x4000, 0x7000, True)]
    mem, root = synth_tables(mappings, alloc_base=0x100)
    theta = {va: pa for va, pa, _ in mappings}
    registry = {root: theta}
    state = MachineState(regs={Reg.CR3: root}, mem=mem)
    assert ias_check(state, root, registry) == []

    # find the L3 slot used by the first two mappings (they share i4, i3)
    trace = walk(root, state.mem, 0x20_0000)
    _, frame, off, _ = trace.steps[1]
    state.mem[frame][off] &= ~1

    expected_broken = set()
    for va in theta:
        i4, i3, _, _, _ = split_va(va)
        t4, t3 = split_va(0x20_0000)[:2]
        if (i4.value, i3.value) == (t4.value, t3.value):
            expected_broken.add(va)
    failures = ias_check(state, root, registry)
    assert {va for va, _ in failures} == expected_broken
    assert all(fault == NotPresent(3, va) for va, fault in failures)
    assert expected_broken == {0x20_0000, 0x20_1000}


def test_ias_check_matches_oracle_walker():
    # the invariant verdict coincides with an independent walker's view
    import oracle

    rng = random.Random(21)
    for _ in range(50):
        n = rng.randrange(1, 6)
        mappings = []
        for i in range(n):
            va = ((rng.randrange(4) << 39) | (rng.randrange(4) << 30)
                  | (rng.randrange(4) << 21) | (rng.randrange(8) << 12))
            mappings.append((va, (0x500 + i) << 12, True))
        try:
            mem, root = synth_tables(mappings, alloc_base=0x100)
        except ValueError:
            continue  # colliding random pages; irrelevant here
        theta = {va: pa for va, pa, _ in mappings}
        state = MachineState(regs={Reg.CR3: root}, mem=mem)
        # corrupt a few random entries
        for _ in range(rng.randrange(0, 3)):
            frame = rng.choice(sorted(mem))
            off = rng.choice(sorted(mem[frame]))
            mem[frame][off] &= ~1
        failures = ias_check(state, root, {root: theta})
        bad = {va for va, _ in failures}
        for va, pa in theta.items():
            verdict = oracle.naive_walk(root, mem, va)
            if verdict == ("ok", pa):
                assert va not in bad
            else:
                assert va in bad


def test_ias_check_detects_misresolution():
    state, registry, root = fixture()
    registry[root][0x20_0000] = 0x7000  # claim a different backing word
    failures = ias_check(state, root, registry)
    assert failures == [(0x20_0000, 0x5000)]


# --------------------------------------------------------------------------
# registry management


def test_register_space():
    registry = {}
    registry = register_space(registry, 0x10_0000)
    assert registry == {0x10_0000: {}}
    with pytest.raises(ValueError):
        register_space(registry, 0x10_0000)
    with pytest.raises(ValueError):
        register_space(registry, 0x10_0001)


# --------------------------------------------------------------------------
# insert / remove


def test_insert_into_empty_theta():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_0000)
    theta, tokens = ghost_insert_walk({}, {}, root, 0x20_0000, 0x5000,
                                      evidence, state)
    assert theta == {0x20_0000: 0x5000}
    assert tokens == {(root, 0x20_0000): FULL}


def test_insert_rejects_double_mapping():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_0000)
    theta, tokens = ghost_insert_walk({}, {}, root, 0x20_0000, 0x5000,
                                      evidence, state)
    with pytest.raises(AlreadyMapped):
        ghost_insert_walk(theta, tokens, root, 0x20_0000, 0x5000, evidence,
                          state)


def test_insert_validates_evidence_arithmetic():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_0000)
    with pytest.raises(EvidenceInvalid):
        ghost_insert_walk({}, {}, root, 0x20_0000, 0x9000, evidence, state)


def test_insert_validates_evidence_against_machine():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_0000)
    trace = walk(root, state.mem, 0x20_0000)
    _, frame, off, _ = trace.steps[3]
    state.mem[frame][off] = 0  # wipe the L1 entry behind the evidence
    with pytest.raises(EvidenceInvalid):
        ghost_insert_walk({}, {}, root, 0x20_0000, 0x5000, evidence, state)


def test_insert_then_ias_check_holds():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_1000)
    theta = dict(registry[root])
    del theta[0x20_1000]
    registry[root] = theta
    new_theta, _tokens = ghost_insert_walk(theta, {}, root, 0x20_1000,
                                           0x6000, evidence, state)
    registry[root] = new_theta
    assert ias_check(state, root, registry) == []


def test_remove_roundtrip():
    state, registry, root = fixture()
    evidence = chain_for(state, root, 0x20_0000)
    theta, tokens = ghost_insert_walk({}, {}, root, 0x20_0000, 0x5000,
                                      evidence, state)
    theta2, tokens2 = ghost_remove_walk(theta, tokens, root, 0x20_0000)
    assert theta2 == {}
    assert tokens2 == {}
    # invariant only quantifies over the map's domain
    registry[root] = theta2
    assert ias_check(state, root, registry) == []


def test_remove_requires_full_token():
    state, registry, root = fixture()
    tokens = {(root, 0x20_0000): Fraction(1, 2)}
    with pytest.raises(InsufficientToken):
        ghost_remove_walk({0x20_0000: 0x5000}, tokens, root, 0x20_0000)


# --------------------------------------------------------------------------
# token arithmetic


def test_token_split_join_stress():
    rng = random.Random(9)
    for _ in range(200):
        key = (0x1000, 0x20_0000)
        tokens = {key: FULL}
        outstanding = []
        for _ in range(rng.randrange(1, 30)):
            if outstanding and rng.random() < 0.5:
                q = outstanding.pop()
                tokens = token_join(tokens, key, q)
            else:
                held = tokens[key]
                if held == 0:
                    continue
                q = held / rng.choice([2, 3, 4])
                tokens = token_split(tokens, key, q)
                outstanding.append(q)
            assert 0 <= tokens[key] <= 1
        for q in outstanding:
            tokens = token_join(tokens, key, q)
        assert tokens[key] == FULL
        with pytest.raises(SumExceedsOne):
            token_join(tokens, key, Fraction(1, 512))


# --------------------------------------------------------------------------
# pte <-> virt


def test_pte_to_virt_forgets_pa():
    claim = PtePt(0x20_0000, Fraction(1, 2), 0x5000, 0x1111)
    assert pte_to_virt(claim) == VirtPt(0x20_0000, Fraction(1, 2), 0x1111)


def test_virt_to_pte_validates_and_roundtrips():
    state, registry, root = fixture()
    v = VirtPt(0x20_0000, FULL, 0x1111)
    p = virt_to_pte(v, 0x5000, state, root)
    assert p == PtePt(0x20_0000, FULL, 0x5000, 0x1111)
    assert pte_to_virt(p) == v
    with pytest.raises(EvidenceInvalid):
        virt_to_pte(v, 0x6000, state, root)
