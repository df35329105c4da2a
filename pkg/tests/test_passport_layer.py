"""Dual-branch layer behavior against hand-rolled numpy oracles."""

import numpy as np
import pytest
import torch

from deepseal.models import ModelSpec, build_model
from deepseal.passport_layer import (PassportLayer, PassportPair, PlainNormAct,
                                     ShapeError, apply_activation)


def make_layer(channels=8, **kwargs):
    torch.manual_seed(0)
    return PassportLayer(channels, **kwargs)


class TestNormalize:
    def test_constant_input_is_zeroed(self):
        layer = make_layer(4)
        x = torch.full((2, 4, 5, 5), 3.7)
        out = layer.normalize(x)
        assert out.abs().max() < 1e-2  # eps-stabilized zero

    def test_symmetric_pair_fixed_point(self):
        layer = make_layer(1, eps=0.0)
        x = torch.tensor([-1.0, 1.0]).reshape(2, 1, 1, 1)
        out = layer.normalize(x)
        assert torch.allclose(out, x, atol=1e-6)

    def test_matches_two_pass_oracle(self):
        layer = make_layer(8)
        x = torch.rand(4, 8, 8, 8, generator=torch.Generator().manual_seed(1))
        out = layer.normalize(x).numpy()
        arr = x.numpy()
        expected = np.empty_like(arr)
        for c in range(8):
            vals = arr[:, c]
            mu = vals.mean()
            var = ((vals - mu) ** 2).mean()
            expected[:, c] = (vals - mu) / np.sqrt(var + layer.eps)
        assert np.abs(out - expected).max() < 1e-5

    def test_group_norm_statistics(self):
        layer = make_layer(8, norm_kind="group", num_groups=2)
        x = torch.rand(3, 8, 4, 4, generator=torch.Generator().manual_seed(2))
        out = layer.normalize(x)
        grouped = out.reshape(3, 2, 4 * 4 * 4)
        assert grouped.mean(dim=2).abs().max() < 1e-5
        assert (grouped.var(dim=2, unbiased=False) - 1).abs().max() < 1e-3

    def test_rejects_channel_mismatch(self):
        layer = make_layer(8)
        with pytest.raises(ShapeError):
            layer.normalize(torch.zeros(1, 4, 2, 2))


class TestDeriveAffine:
    def test_identity_without_tlp_pools_constant(self):
        layer = make_layer(4, use_tlp=False)
        fm = torch.ones(1, 4, 6, 6) * torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
        gamma_p, beta_p = layer.derive_affine(fm, fm * 2)
        assert torch.allclose(gamma_p, torch.tensor([1.0, 2.0, 3.0, 4.0]))
        assert torch.allclose(beta_p, torch.tensor([2.0, 4.0, 6.0, 8.0]))

    def test_zero_tlp_weights_give_bias(self):
        layer = make_layer(4)
        for lin in (layer.tlp_gamma[0], layer.tlp_gamma[2]):
            torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(layer.tlp_gamma[0].bias)
        with torch.no_grad():
            layer.tlp_gamma[2].bias.copy_(torch.tensor([5.0, 6.0, 7.0, 8.0]))
        gamma_p, _ = layer.derive_affine(torch.rand(1, 4, 3, 3), torch.rand(1, 4, 3, 3))
        assert torch.allclose(gamma_p, torch.tensor([5.0, 6.0, 7.0, 8.0]))

    def test_matches_pool_then_matmul_oracle(self):
        layer = make_layer(6)
        fm_g = torch.rand(1, 6, 5, 5, generator=torch.Generator().manual_seed(3))
        fm_b = torch.rand(1, 6, 5, 5, generator=torch.Generator().manual_seed(4))
        gamma_p, beta_p = layer.derive_affine(fm_g, fm_b)

        def oracle(fm, tlp):
            pooled = fm.numpy().mean(axis=(2, 3)).reshape(-1)
            w0 = tlp[0].weight.detach().numpy()
            b0 = tlp[0].bias.detach().numpy()
            h = w0 @ pooled + b0
            h = np.where(h > 0, h, 0.01 * h)  # leaky relu
            w1 = tlp[2].weight.detach().numpy()
            b1 = tlp[2].bias.detach().numpy()
            return w1 @ h + b1

        assert np.abs(gamma_p.detach().numpy() - oracle(fm_g, layer.tlp_gamma)).max() < 1e-5
        assert np.abs(beta_p.detach().numpy() - oracle(fm_b, layer.tlp_beta)).max() < 1e-5

    def test_rejects_shape_mismatch(self):
        layer = make_layer(4)
        with pytest.raises(ShapeError):
            layer.derive_affine(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2))


class TestForwardDual:
    def test_collapses_to_deploy_when_aligned(self):
        layer = make_layer(5)
        with torch.no_grad():
            layer.weight.copy_(torch.rand(5) + 0.5)
            layer.bias.copy_(torch.randn(5))
            layer.weight_t.copy_(layer.weight)
            layer.bias_t.copy_(layer.bias)
        x = torch.randn(3, 5, 4, 4)
        deploy, verify = layer.forward_dual(x, torch.ones(5), torch.zeros(5))
        assert torch.equal(deploy, verify)

    def test_zero_scale_ignores_input(self):
        layer = make_layer(4)
        beta_p = torch.tensor([0.5, -0.5, 1.0, 2.0])
        _, v1 = layer.forward_dual(torch.randn(2, 4, 3, 3), torch.zeros(4), beta_p)
        _, v2 = layer.forward_dual(torch.randn(2, 4, 3, 3) * 9, torch.zeros(4), beta_p)
        expected = apply_activation(beta_p, "relu").view(1, 4, 1, 1).expand_as(v1)
        assert torch.allclose(v1, expected)
        assert torch.allclose(v2, expected)

    def test_matches_scalar_loop_oracle(self):
        layer = make_layer(3)
        with torch.no_grad():
            for p in (layer.weight, layer.bias, layer.weight_t, layer.bias_t):
                p.copy_(torch.randn(3))
        gamma_p, beta_p = torch.randn(3), torch.randn(3)
        x = torch.randn(2, 3, 2, 2)
        with torch.no_grad():
            deploy, verify = layer.forward_dual(x, gamma_p, beta_p)

        x_norm = layer.normalize(x).numpy()
        dep = np.empty_like(x_norm)
        ver = np.empty_like(x_norm)
        for n in range(2):
            for c in range(3):
                for i in range(2):
                    for j in range(2):
                        xn = x_norm[n, c, i, j]
                        dep[n, c, i, j] = max(layer.weight[c].item() * xn
                                              + layer.bias[c].item(), 0)
                        inner = layer.weight_t[c].item() * xn + layer.bias_t[c].item()
                        ver[n, c, i, j] = max(gamma_p[c].item() * inner
                                              + beta_p[c].item(), 0)
        assert np.abs(deploy.numpy() - dep).max() < 1e-5
        assert np.abs(verify.numpy() - ver).max() < 1e-5

    def test_relu_outputs_nonnegative(self):
        layer = make_layer(4)
        deploy, verify = layer.forward_dual(torch.randn(2, 4, 3, 3),
                                            torch.randn(4), torch.randn(4))
        assert (deploy >= 0).all() and (verify >= 0).all()

    @pytest.mark.parametrize("kind", ["sigmoid", "leaky_relu"])
    def test_activation_variants(self, kind):
        layer = make_layer(4, activation_kind=kind)
        x = torch.randn(2, 4, 3, 3)
        deploy, _ = layer.forward_dual(x, torch.ones(4), torch.zeros(4))
        pre = layer(x, mode="deploy", apply_act=False)
        assert torch.allclose(deploy, apply_activation(pre, kind))


class TestBranchIndependence:
    def test_verify_changes_deploy_fixed(self):
        layer = make_layer(6)
        x = torch.randn(2, 6, 4, 4)
        d1, v1 = layer.forward_dual(x, torch.ones(6), torch.zeros(6))
        d2, v2 = layer.forward_dual(x, torch.ones(6) * 3, torch.ones(6))
        assert torch.equal(d1, d2)
        assert not torch.equal(v1, v2)

    def test_shared_statistics_single_computation(self):
        layer = make_layer(4)
        calls = []
        original = layer._batch_stats

        def spy(x):
            calls.append(1)
            return original(x)

        layer._batch_stats = spy
        layer.forward_dual(torch.randn(2, 4, 3, 3), torch.ones(4), torch.zeros(4))
        assert len(calls) == 1


class TestGradients:
    def test_affine_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        layer = PassportLayer(3).double()
        x = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        gamma_p = torch.randn(3, dtype=torch.float64, requires_grad=True)
        beta_p = torch.randn(3, dtype=torch.float64, requires_grad=True)

        def scalar_out(vectors):
            deploy, verify = layer.forward_dual(x, vectors[4], vectors[5])
            return (deploy.sum() + (verify * torch.linspace(
                0.5, 1.5, verify.numel(), dtype=torch.float64).view_as(verify)).sum())

        params = [layer.weight, layer.bias, layer.weight_t, layer.bias_t,
                  gamma_p, beta_p]
        loss = scalar_out(params)
        grads = torch.autograd.grad(loss, params)
        eps = 1e-6
        for pi, p in enumerate(params):
            for i in range(p.numel()):
                with torch.no_grad():
                    orig = p.view(-1)[i].item()
                    p.view(-1)[i] = orig + eps
                    up = scalar_out(params).item()
                    p.view(-1)[i] = orig - eps
                    down = scalar_out(params).item()
                    p.view(-1)[i] = orig
                fd = (up - down) / (2 * eps)
                an = grads[pi].view(-1)[i].item()
                assert abs(an - fd) <= 1e-3 * max(1.0, abs(fd)), \
                    f"param {pi} index {i}: analytic {an} vs fd {fd}"


class TestPassportPropagation:
    def test_single_layer_head_is_conv_output(self):
        spec = ModelSpec(architecture="toy_cnn",
                         passport_layer_names=["units.0.site"])
        torch.manual_seed(6)
        model = build_model(spec)
        pair = PassportPair(torch.rand(3, 32, 32), torch.rand(3, 32, 32))
        feats = model.propagate_passports([pair])
        expected = model.units[0].conv(pair.gamma_image.unsqueeze(0))
        assert torch.allclose(feats[0][0], expected, atol=1e-6)

    def test_identical_images_identical_streams(self):
        spec = ModelSpec(architecture="toy_cnn")
        torch.manual_seed(7)
        model = build_model(spec)
        img = torch.rand(3, 32, 32)
        pairs = [PassportPair(img.clone(), img.clone(), layer_index=i)
                 for i in range(3)]
        for gamma_feat, beta_feat in model.propagate_passports(pairs):
            assert torch.equal(gamma_feat, beta_feat)

    def test_matches_manual_forward_oracle(self):
        # two-conv toy path with fixed weights, recomputed layer by layer
        spec = ModelSpec(architecture="toy_cnn",
                         passport_layer_names=["units.1.site", "units.2.site",
                                               "units.3.site"])
        torch.manual_seed(8)
        model = build_model(spec)
        model.eval()
        g = torch.Generator().manual_seed(9)
        pairs = [PassportPair(torch.rand(3, 32, 32, generator=g),
                              torch.rand(3, 32, 32, generator=g), layer_index=i)
                 for i in range(3)]
        feats = model.propagate_passports(pairs)

        def manual_stream(img, upto):
            """Run the gamma image of pair `upto` through units 0..upto."""
            import torch.nn.functional as F
            x = img.unsqueeze(0)
            for i, unit in enumerate(model.units):
                x = unit.conv(x)
                if i == upto:
                    return x
                site = unit.site
                if isinstance(site, PassportLayer):
                    mean = x.mean(dim=(2, 3), keepdim=True)
                    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
                    x = (x - mean) / torch.sqrt(var + site.eps)
                    x = F.relu(x)
                else:
                    mean = x.mean(dim=(2, 3), keepdim=True)
                    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
                    x = (x - mean) / torch.sqrt(var + site.norm.eps)
                    x = x * site.norm.weight.view(1, -1, 1, 1) + site.norm.bias.view(1, -1, 1, 1)
                    x = F.relu(x)
                if unit.pool:
                    x = F.max_pool2d(x, 2)
            raise AssertionError("site index out of range")

        for layer_idx, (gamma_feat, _) in enumerate(feats):
            expected = manual_stream(pairs[layer_idx].gamma_image, layer_idx + 1)
            assert (gamma_feat - expected).abs().max() < 1e-5

    def test_resolution_mismatch_raises(self):
        model = build_model(ModelSpec(architecture="toy_cnn"))
        bad = [PassportPair(torch.rand(3, 16, 16), torch.rand(3, 16, 16),
                            layer_index=i) for i in range(3)]
        with pytest.raises(ShapeError):
            model.propagate_passports(bad)

    def test_batched_equals_individual_propagation(self):
        # per-sample statistics make the batched streams independent
        torch.manual_seed(10)
        model = build_model(ModelSpec(architecture="toy_cnn"))
        g = torch.Generator().manual_seed(11)
        pairs = [PassportPair(torch.rand(3, 32, 32, generator=g),
                              torch.rand(3, 32, 32, generator=g), layer_index=i)
                 for i in range(3)]
        feats = model.propagate_passports(pairs)
        for i, pair in enumerate(pairs):
            solo = [PassportPair(pair.gamma_image, pair.beta_image, layer_index=j)
                    for j in range(3)]
            solo_feats = model.propagate_passports(solo)
            assert torch.allclose(feats[i][0], solo_feats[i][0], atol=1e-5)


class TestPlainNormAct:
    def test_passport_mode_keeps_running_stats(self):
        site = PlainNormAct(4)
        before = site.norm.running_mean.clone()
        site.train()
        site(torch.randn(2, 4, 3, 3), mode="passport")
        assert torch.equal(before, site.norm.running_mean)
        site(torch.randn(2, 4, 3, 3), mode="deploy")
        assert not torch.equal(before, site.norm.running_mean)

    def test_verify_and_deploy_share_module(self):
        site = PlainNormAct(4)
        site.eval()
        x = torch.randn(2, 4, 3, 3)
        assert torch.equal(site(x, mode="deploy"), site(x, mode="verify"))


class TestPassportPairValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            PassportPair(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4))

    def test_side_validation(self):
        with pytest.raises(ValueError):
            PassportPair(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), side="thief")
