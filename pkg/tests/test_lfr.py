import json
import math

import numpy as np
import pytest

from cvarsynth.errors import CvarSynthError, SpecError
from cvarsynth.lfr import (
    ControllerBlock,
    ControllerTemplate,
    DeltaStructure,
    LfrModel,
    close_controller,
    close_controller_lfr,
    close_controller_with_jacobian,
    extract_channel,
    instantiate_delta,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from cvarsynth.ltisys import StateSpace, freq_response, spectral_abscissa


def static_template(n_meas=1, n_ctrl=1):
    blk = ControllerBlock(inputs=tuple(range(n_meas)), outputs=tuple(range(n_ctrl)), order=0)
    return ControllerTemplate(n_meas=n_meas, n_ctrl=n_ctrl, blocks=(blk,))


def first_order_uncertain():
    """x' = -(1 + 0.5 d) x + w, z = x, as an LFR with one delta port."""
    # delta port first, then w; outputs: delta, then z
    M = StateSpace(
        [[-1.0]],
        [[-0.5, 1.0]],
        [[1.0], [1.0]],
        [[0.0, 0.0], [0.0, 0.0]],
    )
    delta = DeltaStructure((("a", 1),))
    return LfrModel(M=M, delta=delta, n_meas=0, n_ctrl=0,
                    w_channels={"w": (0, 1)}, z_channels={"z": (0, 1)})


class TestDeltaStructure:
    def test_expand_repeats(self):
        ds = DeltaStructure((("a", 1), ("b", 3)))
        assert ds.total_dim == 4
        assert np.array_equal(ds.expand([2.0, -1.0]), [2.0, -1.0, -1.0, -1.0])

    def test_duplicate_names_rejected(self):
        with pytest.raises(SpecError):
            DeltaStructure((("a", 1), ("a", 2)))


class TestInstantiate:
    def test_affine_first_order(self):
        model = first_order_uncertain()
        for d in (-1.0, 0.0, 0.8):
            sys = instantiate_delta(model, [d])
            assert sys.A[0, 0] == pytest.approx(-1.0 - 0.5 * d, abs=1e-15)
            assert sys.B[0, 0] == 1.0 and sys.C[0, 0] == 1.0

    def test_zero_sample_recovers_nominal(self):
        model = first_order_uncertain()
        sys = instantiate_delta(model, [0.0])
        assert np.array_equal(sys.A, [[-1.0]])

    def test_repeated_block(self):
        # A(d) = A0 + d * (E1 + E2) through a 2x repeated scalar block
        A0 = np.array([[-2.0, 1.0], [0.0, -3.0]])
        E1 = np.outer([1.0, 0.0], [0.0, 1.0])
        E2 = np.outer([0.0, 1.0], [1.0, 0.0])
        Bd = np.column_stack([[1.0, 0.0], [0.0, 1.0]])
        Cd = np.vstack([[0.0, 1.0], [1.0, 0.0]])
        M = StateSpace(
            A0,
            np.hstack([Bd, [[1.0], [0.0]]]),
            np.vstack([Cd, [[1.0, 0.0]]]),
            np.zeros((3, 3)),
        )
        model = LfrModel(M=M, delta=DeltaStructure((("j", 2),)), n_meas=0, n_ctrl=0,
                         w_channels={"w": (0, 1)}, z_channels={"z": (0, 1)})
        for d in (-0.7, 0.3):
            sys = instantiate_delta(model, [d])
            assert np.allclose(sys.A, A0 + d * (E1 + E2), atol=1e-14)

    def test_rational_feedback_through_m11(self):
        # scalar loop: z = d / (1 - 0.5 d) w
        M = StateSpace(
            np.zeros((0, 0)), np.zeros((0, 2)), np.zeros((2, 0)),
            [[0.5, 1.0], [1.0, 0.0]],
        )
        model = LfrModel(M=M, delta=DeltaStructure((("m", 1),)), n_meas=0, n_ctrl=0,
                         w_channels={"w": (0, 1)}, z_channels={"z": (0, 1)})
        d = 0.6
        sys = instantiate_delta(model, [d])
        assert sys.D[0, 0] == pytest.approx(d / (1 - 0.5 * d), rel=1e-14)

    def test_singular_loop_detected(self):
        M = StateSpace(
            np.zeros((0, 0)), np.zeros((0, 2)), np.zeros((2, 0)),
            [[0.5, 1.0], [1.0, 0.0]],
        )
        model = LfrModel(M=M, delta=DeltaStructure((("m", 1),)), n_meas=0, n_ctrl=0,
                         w_channels={"w": (0, 1)}, z_channels={"z": (0, 1)})
        with pytest.raises(CvarSynthError) as ei:
            instantiate_delta(model, [2.0])
        assert ei.value.code == "delta_loop_singular"


class TestTemplate:
    def test_dim_and_roundtrip(self):
        rng = np.random.default_rng(2)
        blocks = (
            ControllerBlock(inputs=(0, 1), outputs=(0,), order=2,
                            free_d=np.zeros((1, 2), dtype=bool)),
            ControllerBlock(inputs=(1,), outputs=(1,), order=1),
        )
        tmpl = ControllerTemplate(n_meas=2, n_ctrl=2, blocks=blocks)
        # block 1: 4 + 4 + 2 + 0, block 2: 1 + 1 + 1 + 1
        assert tmpl.dim_k == 14
        k = rng.standard_normal(tmpl.dim_k)
        mats = tmpl.devectorize(k)
        assert np.array_equal(tmpl.vectorize(mats), k)

    def test_frozen_entries_keep_base(self):
        blk = ControllerBlock(inputs=(0,), outputs=(0,), order=0,
                              base_d=[[1.5]], free_d=[[False]])
        tmpl = ControllerTemplate(n_meas=1, n_ctrl=1, blocks=(blk,))
        assert tmpl.dim_k == 0
        (a, b, c, d), = tmpl.devectorize(np.zeros(0))
        assert d[0, 0] == 1.5

    def test_assemble_places_blocks(self):
        blocks = (
            ControllerBlock(inputs=(1,), outputs=(0,), order=1),
        )
        tmpl = ControllerTemplate(n_meas=2, n_ctrl=1, blocks=blocks)
        k = np.array([-3.0, 2.0, 4.0, 0.5])  # a, b, c, d
        K = tmpl.assemble(k)
        assert K.A[0, 0] == -3.0
        assert np.array_equal(K.B, [[0.0, 2.0]])
        assert K.C[0, 0] == 4.0
        assert np.array_equal(K.D, [[0.0, 0.5]])

    def test_shared_output_rejected(self):
        blocks = (
            ControllerBlock(inputs=(0,), outputs=(0,), order=0),
            ControllerBlock(inputs=(0,), outputs=(0,), order=0),
        )
        with pytest.raises(SpecError):
            ControllerTemplate(n_meas=1, n_ctrl=1, blocks=blocks)


class TestCloseController:
    def test_integrator_static_gain_pole(self):
        # plant 1/s with u = -k y: closed pole at -k
        plant = StateSpace([[0.0]], [[1.0, 1.0]], [[1.0], [1.0]], np.zeros((2, 2)))
        tmpl = static_template()
        closed = close_controller(plant, tmpl, [2.0])
        assert closed.nstates == 1
        assert spectral_abscissa(closed).abscissa == pytest.approx(-2.0, abs=1e-12)

    def test_dynamic_controller_matches_manual_loop(self):
        # plant y = 1/(s+1) u + w; controller K = c/(s - a) via template
        plant = StateSpace([[-1.0]], [[1.0, 1.0]], [[1.0], [1.0]], np.zeros((2, 2)))
        blk = ControllerBlock(inputs=(0,), outputs=(0,), order=1)
        tmpl = ControllerTemplate(n_meas=1, n_ctrl=1, blocks=(blk,))
        a, b, c, d = -2.0, 1.0, 3.0, 0.25
        closed = close_controller(plant, tmpl, [a, b, c, d])
        # closed-loop w -> z transfer: G/(1 + GK) with G = 1/(s+1)
        for w in (0.0, 0.7, 3.0):
            s = 1j * w
            G = 1.0 / (s + 1.0)
            K = c / (s - a) * b + d
            want = G / (1.0 + G * K)
            got = freq_response(closed, w)[0, 0]
            assert got == pytest.approx(want, abs=1e-12)

    def test_closures_commute(self):
        rng = np.random.default_rng(4)
        nd, n_meas, n_ctrl, nw, nz, nx = 3, 2, 1, 2, 2, 3
        A = rng.standard_normal((nx, nx)) - 2.0 * np.eye(nx)
        B = rng.standard_normal((nx, nd + n_ctrl + nw))
        C = rng.standard_normal((nd + n_meas + nz, nx))
        D = 0.2 * rng.standard_normal((nd + n_meas + nz, nd + n_ctrl + nw))
        model = LfrModel(
            M=StateSpace(A, B, C, D),
            delta=DeltaStructure((("p", 1), ("q", 2))),
            n_meas=n_meas, n_ctrl=n_ctrl,
            w_channels={"w": (0, 2)}, z_channels={"z": (0, 2)},
        )
        blk = ControllerBlock(inputs=(0, 1), outputs=(0,), order=2)
        tmpl = ControllerTemplate(n_meas=n_meas, n_ctrl=n_ctrl, blocks=(blk,))
        k = 0.5 * rng.standard_normal(tmpl.dim_k)
        sample = np.array([0.4, -0.6])

        path1 = close_controller(instantiate_delta(model, sample), tmpl, k)
        path2 = instantiate_delta(close_controller_lfr(model, tmpl, k), sample)
        for w in (0.0, 0.5, 2.0, 11.0):
            g1 = freq_response(path1, w)
            g2 = freq_response(path2, w)
            assert np.allclose(g1, g2, atol=1e-10)

    def test_algebraic_loop_detected(self):
        plant = StateSpace([[-1.0]], [[1.0, 0.0]], [[1.0], [0.0]],
                           [[1.0, 0.0], [0.0, 0.0]])
        tmpl = static_template()
        with pytest.raises(CvarSynthError) as ei:
            close_controller(plant, tmpl, [-1.0])
        assert ei.value.code == "controller_loop_singular"


class TestClosureJacobian:
    def test_pullback_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        nx, n_meas, n_ctrl, nw, nz = 3, 2, 2, 2, 2
        A = rng.standard_normal((nx, nx)) - 1.5 * np.eye(nx)
        B = rng.standard_normal((nx, n_ctrl + nw))
        C = rng.standard_normal((n_meas + nz, nx))
        D = np.zeros((n_meas + nz, n_ctrl + nw))
        D[:n_meas, :n_ctrl] = 0.3 * rng.standard_normal((n_meas, n_ctrl))  # Dyu != 0
        D[n_meas:, :n_ctrl] = rng.standard_normal((nz, n_ctrl))
        D[:n_meas, n_ctrl:] = rng.standard_normal((n_meas, nw))
        plant = StateSpace(A, B, C, D)
        blocks = (
            ControllerBlock(inputs=(0, 1), outputs=(0,), order=2),
            ControllerBlock(inputs=(1,), outputs=(1,), order=0),
        )
        tmpl = ControllerTemplate(n_meas=n_meas, n_ctrl=n_ctrl, blocks=blocks)
        k0 = 0.3 * rng.standard_normal(tmpl.dim_k)

        GA = rng.standard_normal((nx + 2, nx + 2))
        GB = rng.standard_normal((nx + 2, nw))
        GC = rng.standard_normal((nz, nx + 2))
        GD = rng.standard_normal((nz, nw))

        def scalar(k):
            cl = close_controller(plant, tmpl, k)
            return (np.sum(GA * cl.A) + np.sum(GB * cl.B)
                    + np.sum(GC * cl.C) + np.sum(GD * cl.D))

        _, jac = close_controller_with_jacobian(plant, tmpl, k0)
        grad = jac.pullback(GA, GB, GC, GD)
        h = 1e-6
        for i in range(tmpl.dim_k):
            e = np.zeros(tmpl.dim_k)
            e[i] = h
            fd = (scalar(k0 + e) - scalar(k0 - e)) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=2e-6, abs=1e-9)


class TestChannels:
    def make_closed(self):
        rng = np.random.default_rng(13)
        model = LfrModel(
            M=StateSpace(
                rng.standard_normal((2, 2)) - 3.0 * np.eye(2),
                rng.standard_normal((2, 3)),
                rng.standard_normal((3, 2)),
                np.zeros((3, 3)),
            ),
            delta=DeltaStructure(()),
            n_meas=1, n_ctrl=1,
            w_channels={"r": (0, 1), "n": (1, 1)},
            z_channels={"e": (0, 1), "u": (1, 1)},
        )
        closed = close_controller(instantiate_delta(model, []), static_template(), [0.5])
        return model, closed

    def test_slicing(self):
        model, closed = self.make_closed()
        chan = extract_channel(closed, model, "n", "u")
        assert (chan.ninputs, chan.noutputs) == (1, 1)
        G_full = freq_response(closed, 1.3)
        G_chan = freq_response(chan, 1.3)
        assert G_chan[0, 0] == pytest.approx(G_full[1, 1], abs=1e-14)

    def test_weighted(self):
        model, closed = self.make_closed()
        w = StateSpace([[-5.0]], [[1.0]], [[2.0]], [[0.0]])
        chan = extract_channel(closed, model, "r", "e", weight=w)
        G = freq_response(chan, 0.9)[0, 0]
        Gw = freq_response(w, 0.9)[0, 0]
        Gb = freq_response(extract_channel(closed, model, "r", "e"), 0.9)[0, 0]
        assert G == pytest.approx(Gw * Gb, abs=1e-13)

    def test_unknown_channel(self):
        model, closed = self.make_closed()
        with pytest.raises(SpecError):
            extract_channel(closed, model, "bogus", "u")


class TestModelFiles:
    def build(self):
        rng = np.random.default_rng(21)
        model = LfrModel(
            M=StateSpace(
                rng.standard_normal((3, 3)),
                rng.standard_normal((3, 6)),
                rng.standard_normal((6, 3)),
                rng.standard_normal((6, 6)) / 7.0,
            ),
            delta=DeltaStructure((("mass", 2), ("damp", 1))),
            n_meas=1, n_ctrl=1,
            w_channels={"r": (0, 1), "n": (1, 1)},
            z_channels={"u": (0, 1), "e": (1, 1)},
        )
        tmpl = ControllerTemplate(
            n_meas=1, n_ctrl=1,
            blocks=(ControllerBlock(inputs=(0,), outputs=(0,), order=2,
                                    free_d=np.zeros((1, 1), bool)),),
        )
        return model, tmpl

    def test_roundtrip_bit_exact(self, tmp_path):
        model, tmpl = self.build()
        path = tmp_path / "model.json"
        save_model(path, model, tmpl)
        loaded, ltmpl = load_model(path)
        assert np.array_equal(loaded.M.A, model.M.A)
        assert np.array_equal(loaded.M.B, model.M.B)
        assert np.array_equal(loaded.M.C, model.M.C)
        assert np.array_equal(loaded.M.D, model.M.D)
        assert loaded.delta.blocks == model.delta.blocks
        assert loaded.w_channels == model.w_channels
        assert loaded.z_channels == model.z_channels
        assert ltmpl.dim_k == tmpl.dim_k
        assert np.array_equal(ltmpl.blocks[0].free_d, tmpl.blocks[0].free_d)

    def test_ragged_matrix_rejected(self):
        model, tmpl = self.build()
        doc = model_to_dict(model, tmpl)
        doc["state_space"]["A"] = [[1.0, 2.0], [3.0]]
        with pytest.raises(SpecError) as ei:
            model_from_dict(doc)
        assert "state_space.A" in str(ei.value)

    def test_bad_format_tag(self):
        with pytest.raises(SpecError):
            model_from_dict({"format": "something-else"})
