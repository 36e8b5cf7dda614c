import numpy as np
import pytest
import torch

from u2ad.config import ModelConfig, ScheduleConfig
from u2ad.model import (
    compose_reconstruction,
    decode,
    encode,
    init_model,
    load_checkpoint,
    parameter_count,
    parameter_digest,
    patch_edge_targets,
    recon_loss,
    save_checkpoint,
    sobel,
)
from u2ad.patching import build_patch_grid, random_mask_plan
from u2ad.trainer import lr_at, make_optimizer, train_step

MICRO = ModelConfig(patch_size=8, embed_dim=16, encoder_depth=1, decoder_depth=1, num_heads=2)


def test_same_seed_same_digest():
    a = init_model(MICRO, np.random.default_rng(5), (32, 32))
    b = init_model(MICRO, np.random.default_rng(5), (32, 32))
    assert parameter_digest(a) == parameter_digest(b)


def test_head_dim_and_parameter_count():
    cfg = ModelConfig(embed_dim=64, num_heads=4, encoder_depth=2, decoder_depth=1)
    model = init_model(cfg, np.random.default_rng(0), (64, 32))
    assert model.encoder[0].attn.head_dim == 16
    assert sum(p.numel() for p in model.parameters()) == parameter_count(cfg)
    assert parameter_count(ModelConfig()) == sum(
        p.numel() for p in init_model(ModelConfig(), np.random.default_rng(0), (64, 64)).parameters()
    )


def _grid_and_image(seed=0, shape=(32, 32)):
    rng = np.random.default_rng(seed)
    roi = np.zeros(shape, dtype=np.uint8)
    roi[:, 10:22] = 1
    return build_patch_grid(roi, 8), rng.random(shape)


def test_encode_length_and_permutation_equivariance():
    model = init_model(MICRO, np.random.default_rng(0), (32, 32)).double()
    grid, img = _grid_and_image()
    vis = np.array([0, 2, 3, 5])
    with torch.no_grad():
        out = encode(model, img, vis, grid)
        assert out.shape == (len(vis) + 1, 16)
        perm = np.array([3, 1, 0, 2])
        out_p = encode(model, img, vis[perm], grid)
    assert torch.allclose(out_p[1:], out[1:][perm], atol=1e-12)
    assert torch.allclose(out_p[0], out[0], atol=1e-12)
    with torch.no_grad():
        assert torch.isfinite(encode(model, np.zeros((32, 32)), vis, grid)).all()


def test_decode_count_and_finite():
    model = init_model(MICRO, np.random.default_rng(1), (32, 32))
    grid, img = _grid_and_image(1)
    vis, masked = np.array([1, 4]), np.array([0, 2, 3, 5, 6, 7])
    with torch.no_grad():
        pix, edge = decode(model, encode(model, img, vis, grid), vis, masked, grid)
    assert pix.shape == (6, 64) and edge.shape == (6, 64)
    assert torch.isfinite(pix).all() and torch.isfinite(edge).all()
    with pytest.raises(ValueError):
        decode(model, encode(model, img, vis, grid), vis, np.array([1]), grid)


def test_depth_zero_decoder_closed_form():
    cfg = ModelConfig(patch_size=8, embed_dim=4, encoder_depth=1, decoder_depth=0, num_heads=1)
    model = init_model(cfg, np.random.default_rng(2), (32, 32)).double()
    with torch.no_grad():
        model.mask_token.copy_(torch.tensor([0.1, -0.2, 0.3, 0.05], dtype=torch.float64))
    grid, img = _grid_and_image(2)
    vis, masked = np.array([0, 1]), np.array([3, 6])
    with torch.no_grad():
        pix, _ = decode(model, encode(model, img, vis, grid), vis, masked, grid)
    W = model.pixel_head.weight.detach().numpy()
    b = model.pixel_head.bias.detach().numpy()
    mt = model.mask_token.detach().numpy()
    table = model.dec_pos.detach().numpy()
    for row, i in enumerate(masked):
        z = mt + table[grid.positions[i] + 1]
        want = [sum(W[o, d] * z[d] for d in range(4)) + b[o] for o in range(64)]
        assert np.allclose(pix[row].numpy(), want, atol=1e-6)


def test_sobel_examples():
    assert np.all(sobel(np.full((6, 6), 0.7)) == 0)
    h = 0.3
    x = np.zeros((8, 8))
    x[:, 4:] = h
    e = sobel(x)
    assert np.allclose(e[1:-1, 3], 4 * h) and np.allclose(e[1:-1, 4], 4 * h)
    assert np.all(sobel(np.random.default_rng(0).random((9, 7))) >= 0)


def test_sobel_direct_convolution_oracle():
    rng = np.random.default_rng(1)
    x = rng.random((7, 9))
    p = np.pad(x, 1, mode="edge")
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = np.zeros_like(x)
    for i in range(7):
        for j in range(9):
            gx = sum(kx[a][b] * p[i + a, j + b] for a in range(3) for b in range(3))
            gy = sum(kx[b][a] * p[i + a, j + b] for a in range(3) for b in range(3))
            out[i, j] = (gx * gx + gy * gy) ** 0.5
    assert np.allclose(sobel(x), out, atol=1e-12)


def test_recon_loss_examples():
    rng = np.random.default_rng(0)
    t = rng.random((3, 64))
    e = patch_edge_targets(t, 8)
    T, E = torch.tensor(t), torch.tensor(e)
    assert recon_loss(T, T, E, E, 0.1).item() == 0.0
    p = torch.tensor(rng.random((3, 64)))
    pe = torch.tensor(rng.random((3, 64)))
    assert recon_loss(T, p, E, pe, 0.0).item() == pytest.approx(((p - T) ** 2).mean().item(), abs=1e-15)
    # scalar loop oracle
    mse = sum((p[i, j].item() - t[i, j]) ** 2 for i in range(3) for j in range(64)) / 192
    edge = sum((pe[i, j].item() - e[i, j]) ** 2 for i in range(3) for j in range(64)) / 192
    assert recon_loss(T, p, E, pe, 0.1).item() == pytest.approx(mse + 0.1 * edge, abs=1e-9)
    assert recon_loss(T, p, E, pe, 0.1).item() >= 0
    with pytest.raises(ValueError):
        recon_loss(T, p[:2], E, pe, 0.1)


def _loss_fn(model, items):
    pix, edge = model.reconstruct_batch(items)
    targets = np.concatenate([p[plan.masked] for p, _, plan in items])
    tgt = torch.tensor(targets, dtype=torch.float64)
    etgt = torch.tensor(patch_edge_targets(targets, 8), dtype=torch.float64)
    return recon_loss(tgt, torch.cat(pix), etgt, torch.cat(edge), 0.1)


def test_gradient_check_micro_model():
    """Analytic gradients against central finite differences, per parameter group."""
    torch.manual_seed(0)
    model = init_model(MICRO, np.random.default_rng(3), (32, 32)).double()
    # larger weights than the default init so every group carries a measurable gradient
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.randn_like(p))
    rng = np.random.default_rng(4)
    roi = np.ones((32, 32), dtype=np.uint8)
    grid = build_patch_grid(roi, 8)
    img = rng.random((32, 32))
    plan = random_mask_plan(grid, 0.75, rng)
    items = [(grid.extract(img), grid.positions, plan)]

    model.zero_grad()
    _loss_fn(model, items).backward()
    eps = 1e-6
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(flat.numel(), 24), replace=False)
        analytic = p.grad.view(-1)[idx].clone().numpy()
        numeric = np.zeros(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _loss_fn(model, items).item()
                flat[i] = orig - eps
                down = _loss_fn(model, items).item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        rel = np.linalg.norm(analytic - numeric) / scale
        assert rel <= 1e-3, f"{name}: relative error {rel:.2e}"


def test_train_step_descends_usually():
    cfg = ModelConfig(patch_size=8, embed_dim=16, encoder_depth=1, decoder_depth=1, num_heads=2)
    sched = ScheduleConfig(lr=1e-3)
    roi = np.zeros((32, 32), dtype=np.uint8)
    roi[:, 8:24] = 1
    grid = build_patch_grid(roi, 8)
    good = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        model = init_model(cfg, rng, (32, 32))
        opt = make_optimizer(model, sched)
        img = rng.random((32, 32))
        items = [(grid.extract(img), grid.positions, random_mask_plan(grid, 0.75, rng))]
        before = train_step(model, opt, items, 0.1)
        with torch.no_grad():
            pix, edge = model.reconstruct_batch(items)
            t = items[0][0][items[0][2].masked]
            after = recon_loss(
                torch.tensor(t, dtype=torch.float32), pix[0],
                torch.tensor(patch_edge_targets(t, 8), dtype=torch.float32), edge[0], 0.1,
            ).item()
        good += after <= before
    assert good >= 90


def test_zero_gradient_leaves_parameters():
    model = init_model(MICRO, np.random.default_rng(0), (32, 32))
    with torch.no_grad():
        for head in (model.pixel_head, model.edge_head):
            head.weight.zero_()
            head.bias.zero_()
    opt = make_optimizer(model, ScheduleConfig())
    grid, _ = _grid_and_image()
    items = [(grid.extract(np.zeros((32, 32))), grid.positions, random_mask_plan(grid, 0.75, np.random.default_rng(0)))]
    before = parameter_digest(model)
    assert train_step(model, opt, items, 0.1) == 0.0
    assert parameter_digest(model) == before


def test_lr_schedule():
    s = ScheduleConfig()
    assert lr_at(s, 0) == 3e-3
    assert lr_at(s, 49) == 3e-3
    assert lr_at(s, 50) == pytest.approx(3e-4)


def test_compose_reconstruction():
    grid, img = _grid_and_image()
    empty = random_mask_plan(grid, 0.01, np.random.default_rng(0))
    assert empty.masked.size == 0
    assert np.array_equal(compose_reconstruction(img, np.zeros((0, 64)), empty, grid).recon_image, img)
    everything = random_mask_plan(grid, 0.999, np.random.default_rng(0))
    everything = type(everything)(np.arange(grid.n), np.zeros(0, int), 1.0)
    perfect = grid.extract(img)
    assert np.array_equal(compose_reconstruction(img, perfect, everything, grid).recon_image, img)
    one = type(everything)(np.array([2]), np.setdiff1d(np.arange(grid.n), [2]), 0.1)
    out = compose_reconstruction(img, np.full((1, 64), 0.5), one, grid).recon_image
    diff = out != img
    r0, c0 = grid.origins[2]
    box = np.zeros_like(diff)
    box[r0:r0 + 8, c0:c0 + 8] = True
    assert np.all(diff <= box) and diff.any()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = init_model(MICRO, np.random.default_rng(0), (32, 32))
    opt = make_optimizer(model, ScheduleConfig())
    grid, img = _grid_and_image()
    items = [(grid.extract(img), grid.positions, random_mask_plan(grid, 0.75, np.random.default_rng(0)))]
    train_step(model, opt, items, 0.1)
    rng = np.random.default_rng(9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"epoch": 3, "rng_state": rng.bit_generator.state}, opt)
    loaded, meta, opt2 = load_checkpoint(path, optimizer_factory=lambda m: make_optimizer(m, ScheduleConfig()))
    assert parameter_digest(loaded) == parameter_digest(model)
    assert meta["epoch"] == 3 and meta["rng_state"] == rng.bit_generator.state
    for p, q in zip(model.parameters(), loaded.parameters()):
        for key in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(opt.state[p][key], opt2.state[q][key])
    # continued training is identical
    train_step(model, opt, items, 0.1)
    train_step(loaded, opt2, items, 0.1)
    assert parameter_digest(loaded) == parameter_digest(model)
    with pytest.raises(ValueError):
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        load_checkpoint(tmp_path / "bad.ckpt")
