import math

import pytest
import torch
import torch.nn.functional as F

from webproto.prototypes import PrototypeConfig, PrototypeStore


def pcfg(**kw):
    base = dict(num_classes=3, proj_dim=4, momentum=0.5, alpha=10.0, tau=0.1)
    base.update(kw)
    return PrototypeConfig(**base)


def unit(*vals):
    return F.normalize(torch.tensor([list(vals)], dtype=torch.float64),
                       dim=-1)[0]


def random_units(n, d, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=gen,
                                   dtype=torch.float64), dim=-1)


class TestInitFromFewshots:
    def test_single_shot_identity(self):
        z = torch.zeros(3, 4, dtype=torch.float64)
        z[0, 0] = z[1, 1] = z[2, 2] = 1.0
        store = PrototypeStore.init_from_fewshots(
            pcfg(), z, torch.tensor([0, 1, 2]))
        assert torch.allclose(store.vectors, z)

    def test_two_shot_symmetry(self):
        cfg = pcfg(num_classes=1, proj_dim=2)
        z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        store = PrototypeStore.init_from_fewshots(cfg, z, torch.tensor([0, 0]))
        expected = torch.tensor([0.70711, 0.70711], dtype=torch.float64)
        assert torch.allclose(store.vectors[0], expected, atol=1e-5)

    def test_matches_brute_force_mean(self):
        cfg = pcfg(num_classes=2, proj_dim=16)
        z = random_units(32, 16)
        labels = torch.tensor([0] * 16 + [1] * 16)
        store = PrototypeStore.init_from_fewshots(cfg, z, labels)
        for k in range(2):
            mean = z[labels == k].mean(dim=0)
            expected = mean / mean.norm()
            assert torch.allclose(store.vectors[k], expected, atol=1e-7)

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            PrototypeStore.init_from_fewshots(
                pcfg(), random_units(2, 4), torch.tensor([0, 1]))

    def test_default_temperature_is_tau(self):
        store = PrototypeStore.init_from_fewshots(
            pcfg(tau=0.2), random_units(3, 4), torch.tensor([0, 1, 2]))
        assert torch.allclose(store.temps,
                              torch.full((3,), 0.2, dtype=torch.float64))


class TestInitZeroShot:
    def test_single_sample_prototype(self):
        cfg = pcfg()
        z = random_units(9, 4)
        labels = torch.tensor([0, 0, 0, 1, 1, 1, 2, 2, 2])
        store = PrototypeStore.init_zero_shot(cfg, z, labels, 1, seed=5)
        for k in range(3):
            members = z[labels == k]
            assert any(torch.allclose(store.vectors[k], m, atol=1e-7)
                       for m in members)

    def test_deterministic_under_seed(self):
        z = random_units(30, 4, seed=2)
        labels = torch.arange(30) % 3
        a = PrototypeStore.init_zero_shot(pcfg(), z, labels, 4, seed=9)
        b = PrototypeStore.init_zero_shot(pcfg(), z, labels, 4, seed=9)
        assert torch.equal(a.vectors, b.vectors)

    def test_uses_all_when_class_small(self):
        cfg = pcfg(num_classes=2)
        z = random_units(4, 4)
        labels = torch.tensor([0, 0, 0, 1])
        store = PrototypeStore.init_zero_shot(cfg, z, labels, 10, seed=0)
        expected = F.normalize(z[:3].mean(dim=0), dim=0)
        assert torch.allclose(store.vectors[0], expected, atol=1e-7)
        assert torch.allclose(store.vectors[1], z[3], atol=1e-7)


class TestRefreshTemperatures:
    def test_two_member_example(self):
        # distances 0.2 and 0.4, alpha=10 -> 0.6 / (2 log 12)
        cfg = pcfg(num_classes=1, proj_dim=2, alpha=10.0)
        c = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        store = PrototypeStore(cfg, c.clone())
        # points at exact distances 0.2 and 0.4 from the prototype
        z = torch.stack([
            c[0] + 0.2 * torch.tensor([0.0, 1.0], dtype=torch.float64),
            c[0] + 0.4 * torch.tensor([0.0, 1.0], dtype=torch.float64),
        ])
        store.refresh_temperatures(z, torch.tensor([0, 0]))
        expected = 0.6 / (2 * math.log(12))
        assert abs(expected - 0.12073) < 1e-5
        assert float(store.temps[0]) == pytest.approx(expected, abs=1e-9)

    def test_zero_distance_clamps_to_floor(self):
        cfg = pcfg(num_classes=1, proj_dim=2, tau=0.1)
        c = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        store = PrototypeStore(cfg, c.clone())
        store.refresh_temperatures(c.repeat(3, 1), torch.zeros(3).long())
        assert float(store.temps[0]) == pytest.approx(cfg.temp_lo)

    def test_linear_in_distances(self):
        cfg = pcfg(num_classes=1, proj_dim=3)
        c = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        offsets = torch.tensor([[0.0, 0.1, 0.0], [0.0, 0.0, 0.2]],
                               dtype=torch.float64)
        phis = []
        for scale in (1.0, 2.0):
            store = PrototypeStore(cfg, c.clone())
            store.refresh_temperatures(c + scale * offsets,
                                       torch.zeros(2).long())
            phis.append(float(store.temps[0]))
        assert phis[1] == pytest.approx(2 * phis[0], rel=1e-9)

    def test_empty_class_keeps_prior(self):
        store = PrototypeStore(pcfg(), random_units(3, 4))
        store.temps[2] = 0.7
        store.refresh_temperatures(random_units(4, 4),
                                   torch.tensor([0, 0, 1, 1]))
        assert float(store.temps[2]) == 0.7

    def test_looser_cluster_gets_larger_temperature(self):
        cfg = pcfg(num_classes=2, proj_dim=3)
        c = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                         dtype=torch.float64)
        store = PrototypeStore(cfg, c.clone())
        tight = c[0] + 0.05 * torch.tensor([0.0, 0.0, 1.0],
                                           dtype=torch.float64)
        loose = c[1] + 0.5 * torch.tensor([0.0, 0.0, 1.0],
                                          dtype=torch.float64)
        z = torch.stack([tight, tight, loose, loose])
        store.refresh_temperatures(z, torch.tensor([0, 0, 1, 1]))
        assert float(store.temps[1]) > float(store.temps[0])


class TestEmaUpdate:
    def test_arithmetic_and_normalization(self):
        cfg = pcfg(num_classes=1, proj_dim=2, momentum=0.5)
        store = PrototypeStore(cfg, torch.tensor([[1.0, 0.0]],
                                                 dtype=torch.float64))
        store.ema_update(torch.tensor([0.0, 1.0], dtype=torch.float64), 0)
        expected = torch.tensor([0.70711, 0.70711], dtype=torch.float64)
        assert torch.allclose(store.vectors[0], expected, atol=1e-5)
        assert int(store.counts[0]) == 1

    def test_fixed_point(self):
        store = PrototypeStore(pcfg(), random_units(3, 4))
        before = store.vectors[1].clone()
        store.ema_update(before.clone(), 1)
        assert torch.allclose(store.vectors[1], before, atol=1e-12)

    def test_matches_reference_recurrence(self):
        # 100 updates at m_p=0.999 against an independent recurrence
        cfg = pcfg(num_classes=1, proj_dim=6, momentum=0.999)
        start = random_units(1, 6, seed=3)
        store = PrototypeStore(cfg, start.clone())
        updates = random_units(100, 6, seed=4)
        ref = start[0].clone()
        for u in updates:
            store.ema_update(u, 0)
            ref = 0.999 * ref + 0.001 * u
            ref = ref / ref.norm()
        assert torch.allclose(store.vectors[0], ref, atol=1e-7)

    def test_unit_norm_preserved(self):
        store = PrototypeStore(pcfg(momentum=0.9), random_units(3, 4))
        gen = torch.Generator().manual_seed(8)
        for i in range(50):
            z = F.normalize(torch.randn(4, generator=gen,
                                        dtype=torch.float64), dim=0)
            store.ema_update(z, i % 3)
            norms = store.vectors.norm(dim=-1)
            assert torch.allclose(norms, torch.ones(3, dtype=torch.float64),
                                  atol=1e-6)

    def test_anchoring_angle_bound(self):
        # one polluted update moves the center by at most ~2(1-m) radians
        m = 0.99
        store = PrototypeStore(pcfg(momentum=m, num_classes=1, proj_dim=8),
                               random_units(1, 8, seed=1))
        gen = torch.Generator().manual_seed(2)
        for _ in range(30):
            before = store.vectors[0].clone()
            z = F.normalize(torch.randn(8, generator=gen,
                                        dtype=torch.float64), dim=0)
            store.ema_update(z, 0)
            cos = float((store.vectors[0] * before).sum().clamp(-1, 1))
            assert math.acos(cos) <= 2 * (1 - m) * 1.5


def test_dump_report_columns():
    store = PrototypeStore(pcfg(), random_units(3, 4))
    fs_means = random_units(3, 4, seed=7)
    report = store.dump_report(fs_means)
    lines = report.strip().split("\n")
    assert lines[0].startswith("class\ttemperature\tmember_count")
    assert len(lines) == 4
    # cosine column recomputable
    k, temp, count, cos, _ = lines[1].split("\t")
    assert k == "1"
    expected = float((store.vectors[0] * fs_means[0]).sum())
    assert float(cos) == pytest.approx(expected, abs=1e-6)


def test_state_roundtrip():
    store = PrototypeStore(pcfg(), random_units(3, 4))
    store.ema_update(random_units(1, 4, seed=5)[0], 2)
    clone = PrototypeStore.from_state(store.state())
    assert torch.equal(store.vectors, clone.vectors)
    assert torch.equal(store.temps, clone.temps)
    assert torch.equal(store.counts, clone.counts)
