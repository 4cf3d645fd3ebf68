from dataclasses import replace

import numpy as np
import pytest

from nsti import diffcore as dc
from nsti import model as mdl
from nsti.adapt import (AdaptConfig, AdaptReport, awmc_run, nst_train, nsti_run, nsti_step, online_run,
                        transcribe, transcribe_lattice)
from nsti.ctc import greedy_decode
from nsti.errors import ValidationError
from nsti.optim import Optimizer
from nsti.transforms import draw_spec


@pytest.fixture
def ckpt(tiny_ckpt):
    return tiny_ckpt


def fast(**kw) -> AdaptConfig:
    base = dict(epochs=2, lr=1e-2, seed=4)
    base.update(kw)
    return AdaptConfig(**base)


def _opt(ck, cfg):
    return Optimizer(ck.params, cfg.optimizer, cfg.lr, cfg.momentum, cfg.eps)


def test_config_validation():
    with pytest.raises(ValidationError):
        AdaptConfig(setting="online", epochs=5)
    with pytest.raises(ValidationError):
        AdaptConfig(setting="batch")
    with pytest.raises(ValidationError):
        AdaptConfig(ema_alpha=1.5)
    cfg = AdaptConfig()
    assert (cfg.epochs, cfg.lr, cfg.copies, cfg.transform.kind) == (5, 9e-5, 2, "freq_mask")
    assert AdaptConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_lr_step_is_a_null_update(ckpt, target_recording):
    before = mdl.to_bytes(ckpt)
    cfg = fast(lr=0.0)
    x = target_recording.normalized()[:96]
    res = nsti_step(ckpt, x, cfg, np.random.default_rng(0), _opt(ckpt, cfg))
    assert not res.skipped and np.isfinite(res.loss) and res.loss > 0
    assert mdl.to_bytes(ckpt) == before


def test_identity_copies_have_equal_losses(ckpt, target_recording):
    cfg = fast(transform=draw_spec("identity"))
    x = target_recording.normalized()[:96]
    res = nsti_step(ckpt, x, cfg, np.random.default_rng(0), _opt(ckpt, cfg))
    assert res.copy_losses[0] == res.copy_losses[1] == res.loss


def test_step_is_deterministic(ckpt, target_recording):
    x = target_recording.normalized()[:96]
    cfg = fast()
    outs = []
    for _ in range(2):
        ck = ckpt.copy()
        res = nsti_step(ck, x, cfg, np.random.default_rng(9), _opt(ck, cfg))
        outs.append((res.loss, mdl.to_bytes(ck)))
    assert outs[0] == outs[1]


def test_teacher_pass_carries_no_gradient(ckpt, target_recording):
    x = target_recording.normalized()[:96]
    cfg = fast()
    lattice = mdl.forward(ckpt, x, "eval")
    a, b = ckpt.copy(), ckpt.copy()
    nsti_step(a, x, cfg, np.random.default_rng(1), _opt(a, cfg))
    nsti_step(b, x, cfg, np.random.default_rng(1), _opt(b, cfg), teacher_lattice=lattice)
    assert mdl.checkpoints_equal(a, b)
    with dc.no_grad():
        out = mdl.forward_graph(ckpt, x, "eval", mdl.leaves(ckpt, requires_grad=True))
    assert not out.requires_grad


def test_empty_pseudo_label_skips(ckpt, target_recording):
    ck = ckpt.copy()
    ck.params["out.b"][-1] = 1e3  # always blank
    before = mdl.to_bytes(ck)
    cfg = fast()
    res = nsti_step(ck, target_recording.normalized()[:96], cfg, np.random.default_rng(0), _opt(ck, cfg))
    assert res.skipped and res.labels == []
    assert mdl.to_bytes(ck) == before


def test_zero_epochs_equals_unadapted(ckpt, target_recording):
    report, _ = nsti_run(ckpt, target_recording, fast(epochs=0))
    assert report.final_transcript == transcribe(ckpt, target_recording.normalized())
    assert report.epochs == []


@pytest.mark.parametrize("setting", ["shuffled", "ordered"])
def test_run_records_every_epoch_and_is_deterministic(ckpt, target_recording, setting):
    cfg = fast(setting=setting, epochs=3)
    r1, c1 = nsti_run(ckpt, target_recording, cfg)
    r2, c2 = nsti_run(ckpt, target_recording, cfg)
    assert isinstance(r1, AdaptReport) and len(r1.epochs) == 3
    assert r1.to_json() == r2.to_json() and mdl.checkpoints_equal(c1, c2)
    assert r1.segments_processed == 3 * r1.n_segments
    assert r1.final_transcript == greedy_decode(transcribe_lattice(c1, target_recording.normalized()))


def test_shuffled_and_ordered_differ(ckpt, target_recording):
    a, _ = nsti_run(ckpt, target_recording, fast(setting="shuffled"))
    b, _ = nsti_run(ckpt, target_recording, fast(setting="ordered"))
    assert a.to_json() != b.to_json()


def test_frozen_stats_and_base_untouched(ckpt, target_recording, templates):
    base = mdl.to_bytes(ckpt)
    stats = {k: v.copy() for k, v in ckpt.stats.items()}
    _, adapted = nsti_run(ckpt, target_recording, fast())
    assert mdl.to_bytes(ckpt) == base
    assert all(np.array_equal(stats[k], adapted.stats[k]) for k in stats)
    assert not mdl.checkpoints_equal(ckpt, adapted)


def test_reset_between_recordings(ckpt, target_recording):
    other = target_recording.crop(0, 200, recording_id=7)
    alone, _ = nsti_run(ckpt, other, fast())
    nsti_run(ckpt, target_recording, fast())
    after, _ = nsti_run(ckpt, other, fast())
    assert alone.to_json() == after.to_json()


def test_online_zero_lr_matches_non_overlap_transcription(ckpt, target_recording):
    cfg = fast(setting="online", epochs=1, lr=0.0)
    report, _ = online_run(ckpt, target_recording, cfg)
    assert report.final_transcript == transcribe(ckpt, target_recording.normalized(), stride=1.0)
    assert len(report.epochs) == 1


def test_online_single_segment_prediction_precedes_update(ckpt, target_recording):
    short = target_recording.crop(0, 96)
    report, _ = online_run(ckpt, short, fast(setting="online", epochs=1))
    assert report.final_transcript == transcribe(ckpt, short.normalized())


def test_awmc_alpha_one_is_unadapted(ckpt, target_recording):
    report, teacher = awmc_run(ckpt, target_recording, fast(setting="awmc", epochs=1, ema_alpha=1.0))
    assert report.final_transcript == transcribe(ckpt, target_recording.normalized(), stride=1.0)
    assert mdl.checkpoints_equal(teacher, ckpt)


def test_awmc_alpha_zero_is_online(ckpt, target_recording):
    a, ca = awmc_run(ckpt, target_recording, fast(setting="awmc", epochs=1, ema_alpha=0.0))
    b, cb = online_run(ckpt, target_recording, fast(setting="online", epochs=1))
    assert a.final_transcript == b.final_transcript
    assert all(np.array_equal(ca.params[k], cb.params[k]) for k in ca.params)


def test_nst_train_snapshots(ckpt, target_recording):
    split = [target_recording.crop(0, 200, 0), target_recording.crop(200, 340, 1)]
    assert len(nst_train(ckpt, split, fast(epochs=0), split)) == 1
    hist = nst_train(ckpt, split, fast(epochs=2), split)
    assert len(hist) == 3 and mdl.checkpoints_equal(hist[0][0], ckpt)
    assert all(0.0 <= e for _, e in hist)
    with pytest.raises(ValidationError):
        nst_train(ckpt, [], fast(), split)


def test_report_json_excludes_timing(ckpt, target_recording):
    report, _ = nsti_run(ckpt, target_recording, fast(epochs=1))
    assert "seconds" not in report.to_json()
    assert "seconds" in report.to_json(timing=True)
