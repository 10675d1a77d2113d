import numpy as np
import pytest

from oracles import param_oracle
from waveformer import checkpoint
from waveformer.cli import CONFIG_ENTRY, main
from waveformer.config import RunConfig

TINY = ["--set", "embed_dim=8", "--set", "heads=2", "--set", "layers=1", "--set", "ffn_dim=16",
        "--set", "per_class=6", "--set", "epochs=2", "--set", "batch=8"]


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "m.wfck"
    assert main(["train", "--synthetic", "--seed", "3", "--out", str(out)] + TINY) == 0
    return out


def test_train_writes_checkpoint_and_history(trained, capsys):
    assert trained.exists()
    hist = trained.with_suffix(".history.csv").read_text().splitlines()
    assert hist[0] == "epoch,split,loss,acc,f1,auroc"
    assert len(hist) == 1 + 2 * 2


def test_train_is_bit_deterministic(tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.wfck"
        assert main(["train", "--synthetic", "--seed", "7", "--out", str(out)] + TINY) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    h = [o.with_suffix(".history.csv").read_bytes() for o in outs]
    assert h[0] == h[1]


def test_eval_fp32_and_int8(trained, capsys):
    capsys.readouterr()
    assert main(["eval", str(trained), "--synthetic", "--split", "train"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "epoch,split,loss,acc,f1,auroc"
    assert rows[1].startswith("final,train,")
    assert main(["eval", str(trained), "--synthetic", "--precision", "int8"]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("final,test,")


def test_ablation_flag_persists_in_checkpoint(tmp_path):
    out = tmp_path / "nr.wfck"
    assert main(["train", "--synthetic", "--no-rope", "--out", str(out)] + TINY) == 0
    cfg = RunConfig.from_text(checkpoint.load(out)[CONFIG_ENTRY])
    assert cfg.ablation.use_rope is False


def test_missing_data_is_usage_error(capsys):
    assert main(["train"] + TINY) == 2
    assert main(["train", "/nonexistent.csv"] + TINY) == 2
    assert main(["params", "--set", "bogus=1"]) == 2


def test_corrupt_checkpoint_exit_4(trained):
    buf = bytearray(trained.read_bytes())
    buf[len(buf) // 2] ^= 0xFF
    trained.write_bytes(bytes(buf))
    assert main(["eval", str(trained), "--synthetic"]) == 4


def test_shape_mismatch_exit_5(trained, capsys):
    ent = checkpoint.load(trained)
    ent["head.weight"] = np.zeros((3, 3), np.float32)
    checkpoint.save(trained, ent)
    assert main(["eval", str(trained), "--synthetic"]) == 5
    assert "head.weight" in capsys.readouterr().err


def test_csv_data_path(tmp_path, capsys):
    csv = tmp_path / "d.csv"
    assert main(["synth", "--out", str(csv)] + TINY) == 0
    out = tmp_path / "c.wfck"
    assert main(["train", str(csv), "--out", str(out)] + TINY) == 0


@pytest.mark.parametrize("D,F,K,J,L", [(8, 16, 3, 1, 1), (64, 256, 6, 2, 2), (256, 1024, 6, 3, 6)])
@pytest.mark.parametrize("wavelet", [True, False])
def test_params_matches_oracle(capsys, D, F, K, J, L, wavelet):
    heads = 2 if D == 8 else 8
    args = ["params", "--set", f"embed_dim={D}", "--set", f"ffn_dim={F}", "--set", f"heads={heads}",
            "--set", f"num_classes={K}", "--set", f"levels={J}", "--set", f"layers={L}"]
    if not wavelet:
        args.append("--no-waveletconv")
    assert main(args) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == f"total {param_oracle(D, F, 40, K, J, L, wavelet)}"
    assert "reference figure 3100000" in out[-1]


def test_bench_both_precisions(capsys):
    assert main(["bench", "--precision", "both", "--iters", "3", "--warmup", "1"] + TINY) == 0
    cap = capsys.readouterr()
    lines = cap.out.splitlines()
    assert lines[0].startswith("precision,iters,warmup,mean_ms")
    assert [l.split(",")[0] for l in lines[1:]] == ["fp32", "int8"]
    assert "published ref" in cap.err
