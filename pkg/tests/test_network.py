"""Forward computation contracts: shapes, causality, masking, sharing,
padding invariance and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from btdnet.data import MODALITIES, Modality
from btdnet.errors import CheckpointMismatch, ConfigError, InvalidLength, ShapeMismatch
from btdnet.network import (
    BtdNet,
    StreamModel,
    apply_state,
    forward_scan,
    load_checkpoint,
    mask_and_concat,
    random_scan_batch,
    routing_groups,
    save_checkpoint,
    scan_to_batch,
)

from conftest import make_padded_scan, tiny_config


@pytest.fixture
def model(cfg):
    torch.manual_seed(0)
    return BtdNet(cfg.model)


class TestCnnFeatures:
    def test_deterministic_on_equal_slices(self, model, rng):
        model.eval()
        s = rng.uniform(-1, 1, size=(224, 224, 3)).astype(np.float32)
        a = model.cnn_features(s.copy())
        b = model.cnn_features(s.copy())
        np.testing.assert_array_equal(a, b)

    def test_output_length_matches_config(self, model, rng):
        s = rng.uniform(-1, 1, size=(224, 224, 3)).astype(np.float32)
        assert model.cnn_features(s).shape == (32,)

    def test_tiny_cnn_distinguishes_extremes(self, model):
        model.eval()
        lo = model.cnn_features(np.full((224, 224, 3), -1.0, dtype=np.float32))
        hi = model.cnn_features(np.full((224, 224, 3), 1.0, dtype=np.float32))
        assert np.abs(lo - hi).max() > 1e-6

    def test_wrong_shape(self, model):
        with pytest.raises(ShapeMismatch):
            model.cnn_features(np.zeros((100, 100, 3), dtype=np.float32))


class TestRnnSequence:
    def test_causality(self, model, rng):
        """Perturbing input row k leaves output rows 0..k-1 bitwise unchanged."""
        model.eval()
        t, d = 8, 32
        feats = rng.normal(size=(t, d)).astype(np.float32)
        base = model.rnn_sequence(feats)
        k = 5
        bumped = feats.copy()
        bumped[k] += 1.0
        out = model.rnn_sequence(bumped)
        np.testing.assert_array_equal(out[:k], base[:k])
        assert np.abs(out[k:] - base[k:]).max() > 0

    def test_shape(self, model, rng):
        out = model.rnn_sequence(rng.normal(size=(8, 32)).astype(np.float32))
        assert out.shape == (8, 16)

    def test_zero_weights_give_zero_outputs(self, cfg, rng):
        """Closed form: with all-zero LSTM parameters every gate is constant
        and the hidden state stays exactly 0 at every step."""
        torch.manual_seed(0)
        model = BtdNet(cfg.model)
        with torch.no_grad():
            for p in model.rnn.parameters():
                p.zero_()
        out = model.rnn_sequence(rng.normal(size=(8, 32)).astype(np.float32))
        np.testing.assert_array_equal(out, np.zeros((8, 16), dtype=np.float32))


class TestMaskAndConcat:
    def test_reference_example(self):
        rows = np.array([[1, 2], [3, 4], [5, 6], [7, 8]], dtype=np.float32)
        out = mask_and_concat(rows, 2)
        np.testing.assert_array_equal(out, [1, 2, 3, 4, 0, 0, 0, 0])

    def test_full_length_is_plain_flatten(self, rng):
        rows = rng.normal(size=(6, 3)).astype(np.float32)
        np.testing.assert_array_equal(mask_and_concat(rows, 6), rows.reshape(-1))

    def test_torch_matches_numpy(self, rng):
        rows = rng.normal(size=(5, 4)).astype(np.float32)
        a = mask_and_concat(rows, 3)
        b = mask_and_concat(torch.from_numpy(rows), 3).numpy()
        np.testing.assert_array_equal(a, b)

    def test_padding_content_is_irrelevant(self, rng):
        rows = rng.normal(size=(7, 3)).astype(np.float32)
        noisy = rows.copy()
        noisy[4:] = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(mask_and_concat(rows, 4), mask_and_concat(noisy, 4))

    @pytest.mark.parametrize("l", [0, 9])
    def test_length_out_of_range(self, rng, l):
        with pytest.raises(InvalidLength):
            mask_and_concat(rng.normal(size=(8, 2)), l)


class TestRoutingAndFusion:
    def test_routing_output_width_default(self, rng):
        cfg = tiny_config()
        cfg.model.routing_units = 64  # library default width
        torch.manual_seed(0)
        model = BtdNet(cfg.model)
        masked = torch.from_numpy(
            rng.normal(size=(2, cfg.model.rnn_units * 8)).astype(np.float32)
        )
        assert model.routing_dense(masked, Modality.FLAIR).shape == (2, 64)

    def test_eval_deterministic(self, model, rng):
        model.eval()
        masked = torch.from_numpy(rng.normal(size=(2, 16 * 8)).astype(np.float32))
        a = model.routing_dense(masked, Modality.T2, )
        b = model.routing_dense(masked, Modality.T2)
        assert torch.equal(a, b)

    def test_gelu_fixed_point(self):
        assert float(torch.nn.functional.gelu(torch.tensor(0.0))) == 0.0

    def test_group_sharing(self, model):
        g = routing_groups(model.config)
        assert set(g) == {"FLAIR_T2", "T1w_T1wCE"}
        assert g["FLAIR_T2"][0] == (Modality.FLAIR, Modality.T2)
        # FLAIR and T2 route through the same dense module instance
        model.eval()
        masked = torch.randn(2, model.config.rnn_units * 8)
        assert torch.equal(
            model.routing_dense(masked, Modality.FLAIR),
            model.routing_dense(masked, Modality.T2),
        )

    def test_group_requires_equal_t(self):
        cfg = tiny_config()
        cfg.model.t[Modality.FLAIR] = 10  # breaks the FLAIR/T2 group
        with pytest.raises(ConfigError):
            BtdNet(cfg.model)
        cfg.model.routing_shared = "per_modality"
        BtdNet(cfg.model)  # per-modality layers lift the restriction

    def test_fusion_logits_shape_and_zero_case(self, model, rng):
        routed = [torch.from_numpy(rng.normal(size=(3, 12)).astype(np.float32)) for _ in range(4)]
        logits = model.fuse_and_classify(routed)
        assert logits.shape == (3, 2)
        with torch.no_grad():
            model.fusion_fc.weight.zero_()
            model.fusion_fc.bias.zero_()
            model.out_fc.weight.zero_()
            model.out_fc.bias.zero_()
        np.testing.assert_array_equal(model.fuse_and_classify(routed).detach().numpy(), 0.0)

    def test_fusion_modality_order_sensitive(self, model, rng):
        routed = [torch.from_numpy(rng.normal(size=(1, 12)).astype(np.float32)) for _ in range(4)]
        base = model.fuse_and_classify(routed)
        swapped = model.fuse_and_classify([routed[1], routed[0], routed[2], routed[3]])
        assert not torch.equal(base, swapped)


class TestForward:
    def test_eval_deterministic(self, model, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 5 for m in MODALITIES})
        a, _ = forward_scan(model, scan)
        b, _ = forward_scan(model, scan)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2,)

    def test_padding_invariance(self, model, rng, cfg):
        lengths = {m: 4 for m in MODALITIES}
        scan = make_padded_scan(rng, cfg, lengths)
        base, _ = forward_scan(model, scan)
        for m in MODALITIES:
            scan.volumes[m].pixels[lengths[m] :] = rng.uniform(
                -1, 1, size=scan.volumes[m].pixels[lengths[m] :].shape
            ).astype(np.float32)
        again, _ = forward_scan(model, scan)
        assert np.abs(base - again).max() < 1e-6

    def test_real_slice_sensitivity(self, model, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 4 for m in MODALITIES})
        base, _ = forward_scan(model, scan)
        scan.volumes[Modality.FLAIR].pixels[1] = rng.uniform(
            -1, 1, size=(224, 224, 3)
        ).astype(np.float32)
        again, _ = forward_scan(model, scan)
        assert np.abs(base - again).max() > 1e-7

    def test_trace_shapes_and_masked_zeros(self, model, rng, cfg):
        lengths = {m: 3 for m in MODALITIES}
        scan = make_padded_scan(rng, cfg, lengths)
        logits, trace = forward_scan(model, scan, keep_trace=True)
        v = cfg.model.rnn_units
        for m in MODALITIES:
            t = cfg.model.t[m]
            assert trace.rnn_outputs[m].shape == (t, v)
            assert trace.masked[m].shape == (t * v,)
            assert (trace.masked[m][lengths[m] * v :] == 0).all()
            assert trace.routed[m].shape == (cfg.model.routing_units,)
        assert trace.fused.shape == (cfg.model.fusion_units,)
        np.testing.assert_array_equal(trace.logits, logits)

    def test_parameter_sharing_across_modalities(self, model, rng, cfg):
        """The FLAIR-path CNN is the T2-path CNN: a single storage."""
        model.eval()
        s = rng.uniform(-1, 1, size=(224, 224, 3)).astype(np.float32)
        before = model.cnn_features(s)
        with torch.no_grad():
            model.backbone.blocks[0].weight.add_(0.05)
        after = model.cnn_features(s)
        assert np.abs(before - after).max() > 0
        # one parameter tensor serves every modality path
        pixels, lengths = random_scan_batch(cfg.model, 1, rng)
        logits_a = model(pixels, lengths)
        assert model.backbone is model.backbone  # single attribute, no copies
        assert logits_a.shape == (1, 2)

    def test_unpadded_scan_rejected(self, model, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 4 for m in MODALITIES})
        scan.volumes[Modality.T2].pixels = scan.volumes[Modality.T2].pixels[:6]
        with pytest.raises(ShapeMismatch):
            scan_to_batch(scan, cfg.model)

    def test_mask_gradient_exact_zero(self, model, rng, cfg):
        """Backprop gradient w.r.t. RNN output rows >= l is exactly zero."""
        pixels, lengths = random_scan_batch(cfg.model, 2, rng, lengths={m: [3, 5] for m in MODALITIES})
        model.train()
        logits, trace = model(pixels, lengths, keep_trace=True)
        logits.sum().backward()
        for m in MODALITIES:
            g = trace.rnn_outputs[m].grad
            assert g is not None
            assert (g[0, 3:] == 0).all() and (g[1, 5:] == 0).all()
            assert g[0, :3].abs().max() > 0

    def test_padding_pixel_gradient_exact_zero(self, model, cfg, rng):
        pixels, lengths = random_scan_batch(cfg.model, 2, rng, lengths={m: [2, 6] for m in MODALITIES})
        for m in MODALITIES:
            pixels[m].requires_grad_(True)
        model.train()
        logits = model(pixels, lengths)
        logits.sum().backward()
        for m in MODALITIES:
            g = pixels[m].grad
            assert (g[0, 2:] == 0).all() and (g[1, 6:] == 0).all()
            assert g[0, :2].abs().max() > 0


class TestStreamModel:
    def test_forward_shape(self, cfg, rng):
        torch.manual_seed(0)
        stream = StreamModel(cfg.model, Modality.FLAIR)
        pixels, lengths = random_scan_batch(cfg.model, 3, rng)
        out = stream(pixels[Modality.FLAIR], lengths[Modality.FLAIR])
        assert out.shape == (3, 2)


class TestResnetBackbone:
    def test_feature_dim_and_forward(self, rng):
        from btdnet.config import BackboneConfig
        from btdnet.network import build_backbone

        net = build_backbone(BackboneConfig("resnet18_gap"))
        assert net.feature_dim == 512
        s = torch.from_numpy(rng.uniform(-1, 1, size=(1, 3, 224, 224)).astype(np.float32))
        net.eval()
        with torch.no_grad():
            assert net(s).shape == (1, 512)

    def test_external_weight_file(self, tmp_path, rng):
        from btdnet.config import BackboneConfig
        from btdnet.network import build_backbone
        from torchvision.models import resnet18

        torch.manual_seed(3)
        donor = resnet18(weights=None)
        torch.save(donor.state_dict(), tmp_path / "w.pt")
        net = build_backbone(BackboneConfig("resnet18_gap", str(tmp_path / "w.pt")))
        assert torch.equal(net.net.conv1.weight, donor.conv1.weight)
        with pytest.raises(CheckpointMismatch):
            build_backbone(BackboneConfig("resnet18_gap", str(tmp_path / "absent.pt")))
        torch.save({"bogus.weight": torch.zeros(3)}, tmp_path / "bad.pt")
        with pytest.raises(CheckpointMismatch):
            build_backbone(BackboneConfig("resnet18_gap", str(tmp_path / "bad.pt")))


class TestCheckpoint:
    def test_roundtrip_byte_identical_payloads(self, model, tmp_path):
        p1 = save_checkpoint(tmp_path / "a.bin", model, {"val_f1": 0.5})
        payload = load_checkpoint(p1)
        fresh = BtdNet(payload.model_config)
        apply_state(fresh, payload.state)
        p2 = save_checkpoint(tmp_path / "b.bin", fresh, {"val_f1": 0.5})
        again = load_checkpoint(p2)
        assert set(payload.state) == set(again.state)
        for k in payload.state:
            assert payload.state[k].tobytes() == again.state[k].tobytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(tmp_path / "missing.bin")

    def test_shape_mismatch(self, model, tmp_path):
        save_checkpoint(tmp_path / "a.bin", model)
        payload = load_checkpoint(tmp_path / "a.bin")
        other_cfg = tiny_config()
        other_cfg.model.routing_units = 20
        torch.manual_seed(0)
        other = BtdNet(other_cfg.model)
        with pytest.raises(CheckpointMismatch):
            apply_state(other, payload.state)

    def test_version_field(self, model, tmp_path):
        import json as _json

        import numpy as _np

        save_checkpoint(tmp_path / "a.bin", model)
        with _np.load(tmp_path / "a.bin", allow_pickle=False) as z:
            header = _json.loads(str(z["__header__"]))
        assert header["version"] == "btdnet-ckpt-v1"
