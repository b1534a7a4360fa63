import numpy as np
import pytest

from spurig.sequence import (
    DictionaryAtom,
    SequenceSchedule,
    build_dictionary,
    load_dictionary,
    match_volume,
    match_voxel,
    nearest_b1,
    save_dictionary,
    simulate_fingerprint,
)
from spurig.shared import ShapeError
from spurig.subspace import balance, compute_basis, expand, project


def isochromat_signal(atom: DictionaryAtom, sched: SequenceSchedule, spins: int = 200):
    """Bloch simulation of ``spins`` isochromats spread over one dephasing cycle."""
    theta = 2 * np.pi * np.arange(spins) / spins
    mx, my, mz = np.zeros(spins), np.zeros(spins), np.ones(spins)

    def rotate(alpha):
        nonlocal my, mz
        cos, sin = np.cos(alpha), np.sin(alpha)
        my, mz = my * cos - mz * sin, my * sin + mz * cos

    def relax(tau):
        nonlocal mx, my, mz
        e1, e2 = np.exp(-tau / atom.t1_ms), np.exp(-tau / atom.t2_ms)
        mx, my, mz = mx * e2, my * e2, mz * e1 + 1 - e1

    if sched.inversion:
        rotate(np.pi * atom.b1)
        mx, my = np.zeros(spins), np.zeros(spins)
        relax(sched.ti_ms)
    signal = np.empty(sched.n_tr, dtype=np.complex128)
    for t in range(sched.n_tr):
        rotate(np.deg2rad(sched.flip_angles[t]) * atom.b1)
        relax(sched.te_ms[t])
        signal[t] = np.mean(mx + 1j * my)
        relax(sched.tr_ms[t] - sched.te_ms[t])
        transverse = (mx + 1j * my) * np.exp(1j * theta)
        mx, my = transverse.real, transverse.imag
    return signal


@pytest.mark.parametrize(
    "atom",
    [
        DictionaryAtom(800, 70, 1.0),
        DictionaryAtom(1300, 90, 0.9),
        DictionaryAtom(4000, 1800, 1.1),
    ],
    ids=["wm", "gm", "csf"],
)
def test_fingerprint_matches_isochromat_simulation(atom):
    sched = SequenceSchedule.default(n_tr=20, half_period=20)
    expected = isochromat_signal(atom, sched)
    assert np.max(np.abs(simulate_fingerprint(atom, sched) - expected)) < 1e-10


def test_zero_flip_angles_give_zero_signal():
    sched = SequenceSchedule(np.zeros(10), 12.5, 1.7)
    signal = simulate_fingerprint(DictionaryAtom(1000, 100, 1.0), sched)
    assert np.array_equal(signal, np.zeros(10, dtype=np.complex128))


def test_inversion_flips_the_first_echo_sign():
    sched = SequenceSchedule(np.full(2, 30.0), 12.5, 1.7)
    signal = simulate_fingerprint(DictionaryAtom(1000, 100, 1.0), sched)
    assert signal[0].imag > 0
    no_inversion = SequenceSchedule(np.full(2, 30.0), 12.5, 1.7, inversion=False)
    assert simulate_fingerprint(DictionaryAtom(1000, 100, 1.0), no_inversion)[0].imag < 0


def test_t2_above_t1_is_rejected(schedule):
    with pytest.raises(ValueError, match="exceeds T1"):
        simulate_fingerprint(DictionaryAtom(100, 200, 1.0), schedule)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"flip_angles": [200.0], "tr_ms": 12.5, "te_ms": 1.7},
        {"flip_angles": [10.0], "tr_ms": 1.0, "te_ms": 1.7},
        {"flip_angles": [], "tr_ms": 12.5, "te_ms": 1.7},
    ],
    ids=["flip", "te", "empty"],
)
def test_invalid_schedules(kwargs):
    with pytest.raises(ValueError):
        SequenceSchedule(**kwargs)


def test_dictionary_keeps_valid_unique_pairs(schedule):
    dictionary = build_dictionary([100, 200, 200], [50, 150, 300], [1.0, 1.0], schedule)
    assert dictionary.n_atoms == 3
    assert dictionary.t1_ms.tolist() == [100, 200, 200]
    assert dictionary.t2_ms.tolist() == [50, 50, 150]
    assert dictionary.signals.shape == (3, schedule.n_tr)
    assert np.allclose(np.linalg.norm(dictionary.normalized, axis=1), 1.0)


def test_dictionary_without_valid_pair(schedule):
    with pytest.raises(ValueError, match="T2 <= T1"):
        build_dictionary([100], [200], [1.0], schedule)


def test_default_grid_atom_count(make_dictionary):
    dictionary, _ = make_dictionary()
    # 26 (T1, T2) pairs with T2 <= T1, three B1 values
    assert dictionary.n_atoms == 78
    assert dictionary.hull() == ((400.0, 4000.0), (40.0, 1800.0), (0.9, 1.1))


def test_match_recovers_atom_and_scale(make_dictionary):
    dictionary, _ = make_dictionary()
    for index in (0, 17, 40, 77):
        result = match_voxel((0.3 - 0.4j) * dictionary.signals[index], dictionary)
        assert result.index == index
        assert result.pd == pytest.approx(0.5, rel=1e-10)
        assert result.similarity == pytest.approx(1.0, rel=1e-12)


def test_match_zero_timeseries(make_dictionary):
    dictionary, _ = make_dictionary()
    result = match_voxel(np.zeros(dictionary.n_tr), dictionary)
    assert result.index == -1 and result.atom is None


def test_match_wrong_length(make_dictionary):
    dictionary, _ = make_dictionary()
    with pytest.raises(ShapeError):
        match_voxel(np.ones(3), dictionary)


def _in_span_volume(dictionary, basis, picks):
    coeffs = project(dictionary.signals[picks].T, basis)
    volume = np.zeros((basis.k, len(picks) + 1), dtype=np.complex128)
    volume[:, : len(picks)] = coeffs * 2.0
    return volume.reshape(basis.k, -1, 1, 1)


def test_subspace_matching_agrees_with_timeseries_matching(make_dictionary):
    dictionary, _ = make_dictionary()
    basis = compute_basis(dictionary, 4)
    picks = [3, 20, 51, 70]
    volume = _in_span_volume(dictionary, basis, picks)
    maps = match_volume(volume, basis, dictionary)
    expected = [match_voxel(x, dictionary).index for x in expand(volume, basis)[:, :4, 0, 0].T]
    assert maps.index[:4, 0, 0].tolist() == expected
    assert not maps.matchable[4, 0, 0]
    assert maps.t1[4, 0, 0] == 0


def test_balancing_does_not_change_matches(make_dictionary):
    dictionary, _ = make_dictionary()
    basis = compute_basis(dictionary, 3)
    balanced = balance(basis)
    volume = _in_span_volume(dictionary, basis, [5, 33, 60])
    plain = match_volume(volume, basis, dictionary)
    mixed = match_volume(balanced.to_balanced(volume), balanced, dictionary)
    assert np.array_equal(plain.index, mixed.index)
    assert np.allclose(plain.pd, mixed.pd)


def test_b1_map_restricts_candidates(make_dictionary):
    dictionary, _ = make_dictionary()
    basis = compute_basis(dictionary, 3)
    volume = _in_span_volume(dictionary, basis, [1, 2, 30])
    maps = match_volume(volume, basis, dictionary, b1_map=np.full(volume.shape[1:], 0.93))
    chosen = dictionary.b1[maps.index[maps.matchable]]
    assert np.all(chosen == 0.9)


def test_nearest_b1_breaks_ties_low():
    assert nearest_b1(np.array([0.95, 1.04, 2.0]), np.array([0.9, 1.0, 1.1])).tolist() == [0, 1, 2]


def test_match_volume_rejects_wrong_k(make_dictionary):
    dictionary, _ = make_dictionary()
    basis = compute_basis(dictionary, 3)
    with pytest.raises(ShapeError):
        match_volume(np.zeros((2, 2, 2, 2)), basis, dictionary)


def test_dictionary_persistence(tmp_path, make_dictionary):
    dictionary, sched = make_dictionary()
    save_dictionary(tmp_path / "dictionary", dictionary, sched)
    loaded, loaded_sched = load_dictionary(tmp_path / "dictionary")
    assert np.array_equal(loaded.signals, dictionary.signals)
    assert np.array_equal(loaded_sched.flip_angles, sched.flip_angles)
    assert (tmp_path / "dictionary" / "atoms.csv").read_text().startswith("T1_ms,T2_ms,B1")
