import dataclasses
import re
from pathlib import Path

import numpy as np
import pytest

from actmem import memory_model as mm
from actmem.encoder import (BenchReport, EncoderLayerSpec, MaskBank, TrainRun, bench, encoder_layer,
                            init_params, measure_ledger, param_leaves, train)
from actmem.errors import ConfigurationError, DivergenceError, ParameterError
from actmem.gelu_fit import save_table
from actmem.ops.common import weighted_sum
from actmem.tape import Tape
from actmem.tensor import Tensor

GOLDEN = Path(__file__).parent / "golden" / "bench_shape.csv"
SMALL = mm.EncoderConfig(H=16, A=4, S=6, B=2)


def _forward(spec, x, seed=3, tape=None):
    tape = tape or Tape()
    X = tape.leaf(Tensor(x))
    P = param_leaves(tape, init_params(spec.cfg, seed))
    out = encoder_layer(tape, X, P, spec, MaskBank(seed, spec.cfg.p))
    return tape, X, P, out


class TestBuild:
    def test_tempo_requires_table(self):
        with pytest.raises(ConfigurationError):
            EncoderLayerSpec(SMALL, "tempo")

    def test_tempo_requires_verified_table(self, table):
        with pytest.raises(ConfigurationError):
            EncoderLayerSpec(SMALL, "tempo", table=dataclasses.replace(table, verified_max_error=None))

    def test_mixed_without_gelu_needs_no_table(self):
        spec = EncoderLayerSpec(SMALL, "mixed", {"softmax", "dropout"})
        assert spec.toggles == frozenset({"softmax", "dropout"})

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            EncoderLayerSpec(SMALL, "fused")

    def test_indivisible_heads(self):
        with pytest.raises(ConfigurationError):
            mm.EncoderConfig(H=10, A=4, S=2)

    def test_input_width_checked(self, rng):
        with pytest.raises(ConfigurationError):
            _forward(EncoderLayerSpec(SMALL), rng.standard_normal((2, 6, 8)))

    def test_table_path(self, tmp_path, table):
        save_table(table, tmp_path / "t.txt")
        spec = EncoderLayerSpec.with_table_path(SMALL, "tempo", tmp_path / "t.txt")
        assert spec.table.segments == table.segments


class TestEquivalence:
    def test_forward_bitwise_equal(self, table, rng):
        x = rng.standard_normal((2, 6, 16))
        ref_out = _forward(EncoderLayerSpec(SMALL), x)[3].value.data
        tempo_out = _forward(EncoderLayerSpec(SMALL, "tempo", table=table), x)[3].value.data
        np.testing.assert_array_equal(ref_out, tempo_out)

    def test_lossless_toggles_match_reference_gradients(self, rng):
        x = rng.standard_normal((2, 6, 16))
        w = rng.standard_normal((2, 6, 16))
        grads = []
        for spec in (EncoderLayerSpec(SMALL), EncoderLayerSpec(SMALL, "mixed", {"layernorm", "softmax", "dropout"})):
            tape, X, P, out = _forward(spec, x)
            g = tape.backward(weighted_sum(tape, out, w))
            grads.append({k: g[v].data for k, v in dict(P, x=X).items()})
        for k in grads[0]:
            np.testing.assert_allclose(grads[0][k], grads[1][k], rtol=0, atol=1e-12, err_msg=k)

    def test_mask_bank_is_deterministic(self):
        a = MaskBank(5, 0.3).mask(0, "attn.dropout", 7, (3, 4))
        b = MaskBank(5, 0.3).mask(0, "attn.dropout", 7, (3, 4))
        c = MaskBank(5, 0.3).mask(0, "attn.dropout", 8, (3, 4))
        np.testing.assert_array_equal(a.bits, b.bits)
        assert not np.array_equal(a.bits, c.bits)

    def test_params_shared_by_seed(self):
        a, b = init_params(SMALL, 9), init_params(SMALL, 9)
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestLedger:
    @pytest.mark.parametrize("cfg", [SMALL, mm.EncoderConfig(H=24, A=3, S=5, B=3, L=2)])
    @pytest.mark.parametrize("variant", ["reference", "tempo"])
    def test_matches_inventory(self, cfg, variant, table):
        led = measure_ledger(EncoderLayerSpec(cfg, variant, table=table))
        check = mm.cross_check(cfg, led, variant)
        assert check.ok, check.describe()

    @pytest.mark.parametrize("toggles", [{"gelu"}, {"layernorm"}, {"dropout"}, {"softmax"},
                                         {"gelu", "softmax"}, {"layernorm", "dropout"}])
    def test_each_toggle_saves_its_share(self, toggles, table):
        spec = EncoderLayerSpec(SMALL, "mixed", toggles, table=table)
        led = measure_ledger(spec)
        assert mm.cross_check(SMALL, led, toggles).ok
        base = measure_ledger(EncoderLayerSpec(SMALL)).total_bytes
        assert (base - led.total_bytes) // SMALL.tokens == mm.net_savings(SMALL, toggles)

    def test_roles(self, table):
        led = measure_ledger(EncoderLayerSpec(SMALL, "tempo", table=table))
        roles = {e.tag: e.role for e in led.entries if e.bytes}
        assert roles["ln1.rstd"] == mm.Role.STATISTIC
        assert roles["ffn.gelu.mask"] == mm.Role.OP_OWN
        assert roles["ffn.gelu.output"] == mm.Role.SHARED


class TestTrain:
    def test_reproducible(self):
        spec = EncoderLayerSpec(SMALL)
        a = train(TrainRun(seed=1, steps=5), spec).losses
        b = train(TrainRun(seed=1, steps=5), spec).losses
        assert a == b

    def test_loss_decreases(self):
        run = train(TrainRun(seed=0, steps=30, lr=5e-2), EncoderLayerSpec(SMALL))
        assert run.losses[-1] < run.losses[0]

    def test_peak_bytes_ratio_matches_model(self, table):
        cfg = SMALL
        r = train(TrainRun(seed=0, steps=2), EncoderLayerSpec(cfg)).records[-1]
        t = train(TrainRun(seed=0, steps=2), EncoderLayerSpec(cfg, "tempo", table=table)).records[-1]
        assert r.peak_bytes == mm.stack_activation_bytes(cfg)
        assert t.peak_bytes == mm.stack_activation_bytes(cfg, "tempo")
        assert t.transient_bytes == 4 * cfg.B * cfg.A * cfg.S * cfg.S

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        with pytest.raises(DivergenceError) as info:
            train(TrainRun(seed=0, steps=50, lr=1e30), EncoderLayerSpec(SMALL))
        assert info.value.step >= 1

    def test_bad_run(self):
        with pytest.raises(ParameterError):
            TrainRun(steps=-1)
        with pytest.raises(ParameterError):
            TrainRun(lr=0.0)


def _normalize_csv(text):
    # Wall-clock columns vary run to run; the golden file pins everything else.
    out = []
    for line in text.splitlines():
        cells = line.split(",")
        if cells[0] in ("reference", "tempo"):
            cells[3] = cells[4] = "<float>"
        elif cells[0] == "ratio":
            cells[4] = "<float>"
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


class TestBench:
    def test_reps_zero(self, table):
        with pytest.raises(ParameterError):
            bench(EncoderLayerSpec(SMALL, "tempo", table=table), reps=0)

    def test_report_has_both_variants(self, table):
        rep = bench(EncoderLayerSpec(SMALL, "tempo", table=table), reps=1)
        assert [r.variant for r in rep.rows] == ["reference", "tempo"]
        assert rep.ratio > 0
        assert "throughput ratio" in rep.to_text()

    def test_csv_matches_golden_shape(self, table):
        rep = bench(EncoderLayerSpec(SMALL, "tempo", table=table), reps=2)
        text = rep.to_csv()
        assert text.splitlines()[0] == BenchReport.CSV_HEADER
        for line in text.splitlines()[1:3]:
            assert re.fullmatch(r"(reference|tempo),2,24,[0-9.]+,[0-9.]+,[0-9]+", line)
        assert _normalize_csv(text) == GOLDEN.read_text()
