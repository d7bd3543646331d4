"""CLI behavior: schemas, determinism, exit codes."""

import json
import math

import numpy as np
import pytest

from olatkit import imagecore, oracle
from olatkit.cli import main
from olatkit.lightrig import save_manifest
from olatkit.imagecore import HdrImage, save_hdr


@pytest.fixture(scope="module")
def stack_dir(tmp_path_factory, toy_stack):
    d = tmp_path_factory.mktemp("stack")
    names = []
    for i in range(toy_stack.count):
        name = f"olat_{i:03d}.hdr"
        save_hdr(d / name, toy_stack.image(i))
        names.append(name)
    save_manifest(d / "manifest.json", toy_stack, names)
    return d


@pytest.fixture(scope="module")
def env_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("envs")
    env = oracle.generate_smooth_env(8, 16, seed=4)
    imagecore.save_hdr(d / "smooth.hdr", env.image)
    uniform = HdrImage.from_array(np.ones((8, 16, 3), np.float32))
    imagecore.save_hdr(d / "uniform.hdr", uniform)
    return d


class TestWeightsCommand:
    def test_uniform_env_sums_to_four_pi(self, stack_dir, env_path, tmp_path):
        out = tmp_path / "w.json"
        code = main(["weights", str(stack_dir / "manifest.json"),
                     str(env_path / "uniform.hdr"), "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        totals = np.sum([doc[k] for k in doc], axis=0)
        np.testing.assert_allclose(totals, 4 * math.pi, atol=1e-9)

    def test_full_turn_rotation_byte_identical(self, stack_dir, env_path, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        main(["weights", str(stack_dir / "manifest.json"), str(env_path / "smooth.hdr"),
              "--rotation", "6.283185307", "--out", str(a)])
        main(["weights", str(stack_dir / "manifest.json"), str(env_path / "smooth.hdr"),
              "--rotation", "0", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_delta_env_single_entry(self, stack_dir, tmp_path):
        arr = np.zeros((8, 16, 3), np.float32)
        arr[3, 9] = 2.0
        delta = tmp_path / "delta.hdr"
        imagecore.save_hdr(delta, HdrImage.from_array(arr))
        out = tmp_path / "w.json"
        main(["weights", str(stack_dir / "manifest.json"), str(delta), "--out", str(out)])
        doc = json.loads(out.read_text())
        nonzero = [k for k, v in doc.items() if any(c != 0 for c in v)]
        assert len(nonzero) == 1

    def test_missing_manifest_exits_3(self, env_path, tmp_path):
        code = main(["weights", str(tmp_path / "missing.json"),
                     str(env_path / "uniform.hdr"), "--out", str(tmp_path / "w.json")])
        assert code == 3


class TestRelightCommand:
    def test_one_hot_weights_reproduce_olat(self, stack_dir, toy_stack, tmp_path):
        doc = {label: [0.0, 0.0, 0.0] for label in toy_stack.rig.labels}
        doc[toy_stack.rig.labels[2]] = [1.0, 1.0, 1.0]
        wpath = tmp_path / "onehot.json"
        wpath.write_text(json.dumps(doc))
        out = tmp_path / "out.hdr"
        code = main(["relight", str(stack_dir / "manifest.json"),
                     "--weights", str(wpath), "--out", str(out)])
        assert code == 0
        img = imagecore.load_hdr(out)
        ref = toy_stack.image(2)
        err = np.abs(img.data - ref.data) / np.maximum(ref.data.max(axis=2, keepdims=True), 1e-30)
        assert err.max() <= 2 * 2.0**-8  # two encode round trips

    def test_byte_identical_reruns(self, stack_dir, env_path, tmp_path):
        outs = []
        for tag in ("a", "b"):
            hdr = tmp_path / f"{tag}.hdr"
            png = tmp_path / f"{tag}.png"
            code = main(["relight", str(stack_dir / "manifest.json"),
                         "--env", str(env_path / "smooth.hdr"), "--rotation", "0.6",
                         "--out", str(hdr), "--png", str(png),
                         "--exposure", "0.5", "--gamma", "2.2"])
            assert code == 0
            outs.append((hdr.read_bytes(), png.read_bytes()))
        assert outs[0] == outs[1]

    def test_weights_and_env_mutually_exclusive(self, stack_dir, env_path, tmp_path):
        code = main(["relight", str(stack_dir / "manifest.json"),
                     "--out", str(tmp_path / "x.hdr")])
        assert code == 2

    def test_mismatched_weights_exit_2(self, stack_dir, tmp_path):
        wpath = tmp_path / "bad.json"
        wpath.write_text(json.dumps({"NOT_A_LIGHT": [1, 1, 1]}))
        code = main(["relight", str(stack_dir / "manifest.json"),
                     "--weights", str(wpath), "--out", str(tmp_path / "x.hdr")])
        assert code == 2


class TestAlignCommand:
    def test_static_take_near_identity(self, tmp_path):
        rng = np.random.default_rng(90)
        from scipy.ndimage import gaussian_filter

        smooth = gaussian_filter(rng.uniform(0, 1, (48, 48)), 2.0)
        smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
        base = HdrImage.from_array(np.repeat(smooth[:, :, None], 3, axis=2).astype(np.float32))
        take = tmp_path / "take"
        take.mkdir()
        for i in range(5):
            save_hdr(take / f"f{i:03d}.hdr", base)
        layout = tmp_path / "layout.json"
        layout.write_text(json.dumps({"frame_count": 5, "tracking_frames": [0, 4],
                                      "block_size": 4}))
        out = tmp_path / "aligned"
        code = main(["align", str(take), str(layout), "--out", str(out)])
        assert code == 0
        for i in range(5):
            img = imagecore.load_hdr(out / f"f{i:03d}.hdr")
            assert np.sqrt(np.mean((img.data - base.data) ** 2)) <= 2e-3

    def test_drifting_take_reports_reduction(self, tmp_path, capsys):
        rng = np.random.default_rng(91)
        from scipy.ndimage import gaussian_filter

        from olatkit.align import TakeLayout
        from olatkit.oracle import generate_drifting_take

        smooth = gaussian_filter(rng.uniform(0, 1, (64, 64)), 2.0)
        smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
        base = HdrImage.from_array(np.repeat(smooth[:, :, None], 3, axis=2).astype(np.float32))
        layout_obj = TakeLayout(frame_count=12, tracking_frames=(0, 11), block_size=11)
        drifted, truth = generate_drifting_take([base] * 12, (2 / 11, 0.1 / 11), layout_obj)
        take, gt = tmp_path / "take", tmp_path / "gt"
        take.mkdir()
        gt.mkdir()
        for i in range(12):
            save_hdr(take / f"f{i:03d}.hdr", drifted[i])
            save_hdr(gt / f"f{i:03d}.hdr", truth[i])
        layout = tmp_path / "layout.json"
        layout.write_text(json.dumps(layout_obj.to_dict()))
        code = main(["align", str(take), str(layout), "--out", str(tmp_path / "out"),
                     "--ground-truth", str(gt)])
        assert code == 0
        report = capsys.readouterr().out
        assert "reduction" in report
        reduction = float(report.rsplit("reduction", 1)[1].strip().rstrip("%"))
        assert reduction >= 70.0

    def test_missing_tracking_exits_2(self, tmp_path):
        base = HdrImage.from_array(np.zeros((16, 16, 3), np.float32))
        take = tmp_path / "take"
        take.mkdir()
        for i in range(3):
            save_hdr(take / f"f{i}.hdr", base)
        layout = tmp_path / "layout.json"
        layout.write_text(json.dumps({"frame_count": 3, "tracking_frames": [1],
                                      "block_size": 21}))
        code = main(["align", str(take), str(layout), "--out", str(tmp_path / "out")])
        assert code == 2


class TestOracleCommand:
    def test_generates_loadable_stack(self, tmp_path):
        scene = tmp_path / "scene.json"
        scene.write_text(json.dumps(oracle.SphereScene().to_dict()))
        out = tmp_path / "stack"
        code = main(["oracle", str(scene), "--lights", "6", "--size", "16",
                     "--out", str(out)])
        assert code == 0
        from olatkit.lightrig import load_manifest

        stack = load_manifest(out / "manifest.json")
        assert stack.count == 6
        assert stack.resolution == (16, 16)


class TestTrainRenderCommands:
    @pytest.fixture(scope="class")
    def small_stack_dir(self, tmp_path_factory):
        d = tmp_path_factory.mktemp("train_stack")
        scene = oracle.SphereScene()
        from olatkit.lightrig import CameraModel

        cam = CameraModel.look_at(eye=(0, 0, -3.2), target=(0, 0, 0),
                                  width=16, height=16, fov_deg=28)
        rig = oracle.generate_rig(4)
        stack = oracle.render_olat_stack(scene, rig, cam)
        names = []
        for i in range(4):
            name = f"o{i}.hdr"
            save_hdr(d / name, stack.image(i))
            names.append(name)
        save_manifest(d / "manifest.json", stack, names)
        (d / "cam.json").write_text(json.dumps(cam.to_dict()))
        return d

    def train_args(self, manifest, out, seed, iters="8"):
        return ["train", str(manifest), "--iters", iters, "--seed", str(seed),
                "--batch-rays", "64", "--channels", "4", "--resolution", "8",
                "--hidden", "16", "--samples", "4", "--out", str(out)]

    def test_defaults(self):
        from olatkit.cli import build_parser

        args = build_parser().parse_args(["train", "m.json", "--out", "f.bin"])
        assert args.lr == pytest.approx(0.00015)
        assert args.lambda_mrf == pytest.approx(0.3)

    def test_zero_iterations_equals_initialization(self, small_stack_dir, tmp_path):
        out = tmp_path / "f.bin"
        code = main(self.train_args(small_stack_dir / "manifest.json", out, seed=3,
                                    iters="0"))
        assert code == 0
        from olatkit.reflectfield import TriplaneField

        loaded = TriplaneField.load(out)
        fresh = TriplaneField.create(channels=4, resolution=8, hidden=16, seed=3)
        assert np.array_equal(loaded.planes, fresh.planes)

    def test_same_seed_bit_identical_checkpoints(self, small_stack_dir, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert main(self.train_args(small_stack_dir / "manifest.json", a, seed=7)) == 0
        assert main(self.train_args(small_stack_dir / "manifest.json", b, seed=7)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_loss_csv_written(self, small_stack_dir, tmp_path):
        out = tmp_path / "f.bin"
        csv = tmp_path / "loss.csv"
        code = main(self.train_args(small_stack_dir / "manifest.json", out, seed=1)
                    + ["--loss-csv", str(csv)])
        assert code == 0
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "iteration,loss"
        assert len(lines) == 9

    def test_render_from_checkpoint(self, small_stack_dir, tmp_path):
        field_path = tmp_path / "f.bin"
        main(self.train_args(small_stack_dir / "manifest.json", field_path, seed=2))
        out = tmp_path / "r.hdr"
        png = tmp_path / "r.png"
        code = main(["render", str(field_path), "--light", "0,1,0",
                     "--camera", str(small_stack_dir / "cam.json"),
                     "--samples", "4", "--out", str(out), "--png", str(png)])
        assert code == 0
        img = imagecore.load_hdr(out)
        assert (img.width, img.height) == (16, 16)
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_light_exits_2(self, small_stack_dir, tmp_path):
        field_path = tmp_path / "f.bin"
        main(self.train_args(small_stack_dir / "manifest.json", field_path, seed=2))
        code = main(["render", str(field_path), "--light", "0,0,0",
                     "--camera", str(small_stack_dir / "cam.json"),
                     "--out", str(tmp_path / "x.hdr")])
        assert code == 2
