import math

import numpy as np
import pytest

from fedsim_contribution_ledger.aggregation import AttentionMatrix, compute_attention
from fedsim_contribution_ledger.contribution.ledger import (
    ImpactLedger, LedgerEntry, contributions, normalize_scores, round_impact, round_impact_noise,
    shared_impact_noise
)
from fedsim_contribution_ledger.params import ParamSet
from fedsim_contribution_ledger.utils.config import AggregationConfig, DomainError, StructuralError

NO_NOISE = AggregationConfig(stepsize=1.0, dp_weight=0.0)

def seeded_ledger(values, round_idx=1):
    ledger = ImpactLedger(len(values))
    return ledger.append(LedgerEntry(round_idx, np.asarray(values, dtype=np.float64), ()))

def random_params(rng):
    return ParamSet([('w', rng.standard_normal((4, 3))), ('b', rng.standard_normal(3))])

class TestRoundImpact:
    def test_clients_equal_to_server_only_decay(self, rng):
        server = random_params(rng)
        clients = {0: server, 1: server}
        ledger = seeded_ledger([1.0, 2.0])
        round_impact(server, server, clients, compute_attention(server, clients), NO_NOISE, 0.7,
                     ledger, [0, 1], 2)
        np.testing.assert_array_equal(ledger.current, [0.7, 1.4])

    def test_hand_evaluated_term(self, make_params):
        step = math.e - 1
        server_before = make_params(w=[0.0])
        server_after = make_params(w=[step])
        clients = {0: make_params(w=[-step])}
        attn = AttentionMatrix([0], ['w'], np.array([[1.0]]))
        ledger = seeded_ledger([1.0])
        round_impact(server_before, server_after, clients, attn, NO_NOISE, 0.7, ledger, [0], 2)
        assert ledger.current[0] == pytest.approx(1.7, rel=1e-9)

    def test_unselected_agents_carry_over_bitwise(self, rng):
        ledger = ImpactLedger(3)
        server = random_params(rng)
        history = []
        for t in range(1, 6):
            selected = [0] if t > 1 else [0, 1, 2]
            clients = {k: random_params(rng) for k in selected}
            after = random_params(rng)
            round_impact(server, after, clients, compute_attention(server, clients), NO_NOISE, 0.7,
                         ledger, selected, t)
            history.append(ledger.current.copy())
            server = after
        for previous, current in zip(history[1:], history[2:]):
            assert current[1] == previous[1] and current[2] == previous[2]
        assert history[-1][0] != history[-2][0]

    def test_noise_from_streams_or_pre_drawn(self, rng):
        server, after = random_params(rng), random_params(rng)
        clients = {0: random_params(rng), 1: random_params(rng)}
        attn = compute_attention(server, clients)
        cfg = AggregationConfig(dp_weight=0.001)
        a = round_impact(server, after, clients, attn, cfg, 0.7, ImpactLedger(2), [0, 1], 1,
                         streams={k: np.random.default_rng(k) for k in clients})
        noise = {k: np.random.default_rng(k).standard_normal(2) for k in clients}
        b = round_impact(server, after, clients, attn, cfg, 0.7, ImpactLedger(2), [0, 1], 1, noise=noise)
        np.testing.assert_array_equal(a.current, b.current)
        with pytest.raises(DomainError):
            round_impact(server, after, clients, attn, cfg, 0.7, ImpactLedger(2), [0, 1], 1)

    def test_attention_distances_match_recomputed_norms(self, rng):
        server, after = random_params(rng), random_params(rng)
        clients = {k: random_params(rng) for k in range(4)}
        attn = compute_attention(server, clients)
        bare = AttentionMatrix(attn.agents, attn.layer_ids, attn.values)
        reused = round_impact(server, after, clients, attn, NO_NOISE, 0.7, ImpactLedger(4), range(4), 1)
        recomputed = round_impact(server, after, clients, bare, NO_NOISE, 0.7, ImpactLedger(4), range(4), 1)
        np.testing.assert_array_equal(reused.current, recomputed.current)

    def test_distances_from_another_norm_are_not_reused(self, rng):
        server, after = random_params(rng), random_params(rng)
        clients = {k: random_params(rng) for k in range(3)}
        l1_attention = compute_attention(server, clients, p=1.0)
        bare = AttentionMatrix(l1_attention.agents, l1_attention.layer_ids, l1_attention.values)
        a = round_impact(server, after, clients, l1_attention, NO_NOISE, 0.7, ImpactLedger(3), range(3), 1)
        b = round_impact(server, after, clients, bare, NO_NOISE, 0.7, ImpactLedger(3), range(3), 1)
        np.testing.assert_array_equal(a.current, b.current)

    @pytest.mark.parametrize('gamma', [0.0, 1.0, 1.5])
    def test_gamma_outside_open_interval(self, rng, gamma):
        server = random_params(rng)
        clients = {0: server}
        with pytest.raises(DomainError):
            round_impact(server, server, clients, compute_attention(server, clients), NO_NOISE, gamma,
                         ImpactLedger(1), [0], 1)

    def test_attention_must_match_selection(self, rng):
        server = random_params(rng)
        clients = {0: server, 1: server}
        with pytest.raises(StructuralError):
            round_impact(server, server, clients, compute_attention(server, clients), NO_NOISE, 0.7,
                         ImpactLedger(3), [0, 1, 2], 1)

def test_shared_noise_uses_first_element_of_each_layer(make_params):
    noise = {3: make_params(w=[[0.5, 9.0], [9.0, 9.0]], b=[-0.25, 9.0])}
    np.testing.assert_array_equal(shared_impact_noise(noise)[3], [0.5, -0.25])

def test_round_noise_rows_do_not_depend_on_selection():
    everyone = round_impact_noise(5, 3, 1.0, np.random.default_rng(4), range(5))
    some = round_impact_noise(5, 3, 1.0, np.random.default_rng(4), [1, 3])
    assert sorted(some) == [1, 3]
    np.testing.assert_array_equal(some[3], everyone[3])
    assert round_impact_noise(5, 3, 2.0, np.random.default_rng(4), [3])[3] == pytest.approx(2 * everyone[3])

class TestImpactLedger:
    def test_round_zero_is_all_zeros(self):
        np.testing.assert_array_equal(ImpactLedger(4).impact_at(0), np.zeros(4))

    def test_rounds_must_increase(self):
        ledger = seeded_ledger([1.0], round_idx=2)
        with pytest.raises(StructuralError):
            ledger.append(LedgerEntry(2, np.array([1.0]), ()))

    def test_carry_over_marks_unmeasured(self):
        ledger = seeded_ledger([0.3, 0.6])
        ledger.carry_over(2, [0])
        assert not ledger.entry(2).measured
        np.testing.assert_array_equal(ledger.impact_at(2), [0.3, 0.6])

    def test_stored_impact_is_read_only(self):
        ledger = seeded_ledger([0.3, 0.6])
        with pytest.raises(ValueError):
            ledger.current[0] = 1.0

class TestContributions:
    def test_equal_impacts_are_uniform(self):
        np.testing.assert_allclose(contributions(seeded_ledger([5.0, 5.0, 5.0]), 1).values, 1 / 3)

    def test_minmax_then_softmax(self):
        con = contributions(seeded_ledger([1.0, 2.0, 3.0]), 1).values
        np.testing.assert_allclose(con, [0.1863, 0.3072, 0.5065], atol=1e-4)

    def test_single_agent(self):
        np.testing.assert_array_equal(normalize_scores(np.array([4.2])), [1.0])

    def test_simplex_rank_and_spread(self, rng):
        for _ in range(20):
            impact = rng.normal(0, 3, size=8)
            con = normalize_scores(impact)
            assert con.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all((con > 0) & (con < 1))
            assert list(np.argsort(con)) == list(np.argsort(impact))
            assert con.max() / con.min() <= math.e * (1 + 1e-12)

    def test_ranking_lists_lowest_first(self):
        con = contributions(seeded_ledger([3.0, 1.0, 2.0]), 1)
        assert con.ranking() == [1, 2, 0]
