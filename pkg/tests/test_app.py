import os
import statistics
from pathlib import Path

import numpy as np
import pytest

from app import ABLATION_NAME, HISTORY_NAME, MODEL_NAME, REPORT_NAME, ablation_plan, run
from utils.config import resolve_config
from utils.data_io import encode_checkpoint
from utils.error_handler import ConfigurationError
from utils.optim import read_history
from utils.retrieval_eval import parse_report
from utils.selfcheck import gradcheck_suite

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'
LITE = ['--set', 'preset=lite', '--set', 'progress=false']


@pytest.fixture(autouse=True)
def ledger_in_tmp(tmp_path, monkeypatch):
    monkeypatch.setenv('CCAN_DATABASE_URL', f"sqlite:///{tmp_path / 'ledger.db'}")


def gen_lite_data(out):
    assert run(['gen-data', '--ids', '4', '--per-id', '2', '--cams', '2', '--size', '8x4', '--k-p', '2',
                '--out', str(out)]) == 0
    return str(out / 'manifest.tsv')


class TestVerificationCommands:
    def test_selftest(self, capsys):
        assert run(['selftest']) == 0
        assert 'FAIL' not in capsys.readouterr().out

    def test_gradcheck_suite(self):
        rows = gradcheck_suite()
        assert rows and all(row.passed for row in rows), [r for r in rows if not r.passed]


class TestLitePipeline:
    def test_gen_train_eval(self, tmp_path, capsys):
        manifest = gen_lite_data(tmp_path / 'data')
        out = tmp_path / 'run'
        assert run(['train', *LITE, '--data', manifest, '--out', str(out)]) == 0
        assert (out / MODEL_NAME).exists() and (out / 'resolved.cfg').exists()
        assert len(read_history(str(out / HISTORY_NAME))) == 2

        assert run(['eval', *LITE, '--data', manifest, '--out', str(out)]) == 0
        report = parse_report((out / REPORT_NAME).read_text())
        assert 0.0 <= report.mAP <= 1.0 and report.evaluated == 4
        assert 'mAP:' in capsys.readouterr().out

    def test_eval_keeps_training_config(self, tmp_path):
        manifest = gen_lite_data(tmp_path / 'data')
        out = tmp_path / 'run'
        assert run(['train', *LITE, '--setting', 'G', '--data', manifest, '--out', str(out)]) == 0
        trained = (out / 'resolved.cfg').read_text()
        assert run(['eval', *LITE, '--setting', 'G', '--seed', '5', '--data', manifest, '--out', str(out)]) == 0
        assert (out / 'resolved.cfg').read_text() == trained
        assert 'seed = 5\n' in (out / 'eval.cfg').read_text()

    def test_training_is_repeatable(self, tmp_path):
        manifest = gen_lite_data(tmp_path / 'data')
        for name in ('a', 'b'):
            assert run(['train', *LITE, '--data', manifest, '--out', str(tmp_path / name)]) == 0
        assert (tmp_path / 'a' / MODEL_NAME).read_bytes() == (tmp_path / 'b' / MODEL_NAME).read_bytes()
        assert (tmp_path / 'a' / HISTORY_NAME).read_bytes() == (tmp_path / 'b' / HISTORY_NAME).read_bytes()

    def test_setting_flag(self, tmp_path):
        manifest = gen_lite_data(tmp_path / 'data')
        out = tmp_path / 'run'
        assert run(['train', *LITE, '--setting', 'G', '--data', manifest, '--out', str(out)]) == 0
        assert 'setting = G\n' in (out / 'resolved.cfg').read_text()


class TestErrors:
    def test_bad_config_exits_2(self, tmp_path, capsys):
        manifest = gen_lite_data(tmp_path / 'data')
        code = run(['train', *LITE, '--set', 'k_p=3', '--data', manifest, '--out', str(tmp_path / 'run')])
        assert code == 2
        assert 'Configuration Problem' in capsys.readouterr().err
        assert not (tmp_path / 'run' / MODEL_NAME).exists()

    def test_unknown_key_exits_2(self, tmp_path):
        assert run(['train', '--set', 'learning_rate=1', '--out', str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        manifest = gen_lite_data(tmp_path / 'data')
        assert run(['eval', *LITE, '--data', manifest, '--out', str(tmp_path / 'none')]) == 2

    def test_corrupt_checkpoint_exits_2(self, tmp_path, capsys):
        manifest = gen_lite_data(tmp_path / 'data')
        raw = bytearray(encode_checkpoint('', {'x': np.zeros(1)}))
        raw[16] = 0xff
        (tmp_path / 'run').mkdir()
        (tmp_path / 'run' / MODEL_NAME).write_bytes(bytes(raw))
        assert run(['eval', *LITE, '--data', manifest, '--out', str(tmp_path / 'run')]) == 2
        assert 'Unreadable File' in capsys.readouterr().err


class TestAblationPlan:
    def test_six_settings_then_sweeps(self):
        cfg = resolve_config({'preset': 'lite', 'out': 'runs/x', 'sweep_d': '4,16', 'sweep_k_p': '1'})
        plan = ablation_plan(cfg)
        assert [label for label, _ in plan] == ['G', 'L', 'G+L', 'G+SS1', 'G+L+CC2', 'CCAN',
                                                'CCAN d=4', 'CCAN d=16', 'CCAN k_p=1']
        assert plan[3][1].out == os.path.join('runs/x', 'G_SS1')
        assert plan[7][1].d == 16 and plan[7][1].setting == 'full'

    def test_invalid_variant_stops_before_training(self):
        cfg = resolve_config({'preset': 'lite', 'sweep_k_p': '3'})
        with pytest.raises(ConfigurationError):
            ablation_plan(cfg)


@pytest.mark.slow
class TestToyScale:
    def test_full_model_retrieves_identities(self, tmp_path):
        manifest = run_gen_toy(tmp_path)
        rank1, mAP = [], []
        for seed in range(3):
            out = tmp_path / f'seed{seed}'
            assert run(['train', '--config', str(CONFIGS / 'toy.cfg'), '--set', 'progress=false',
                        '--data', manifest, '--out', str(out), '--seed', str(seed)]) == 0
            history = read_history(str(out / HISTORY_NAME))
            assert history[-1]['total'] < history[0]['total']
            assert run(['eval', '--config', str(CONFIGS / 'toy.cfg'), '--set', 'progress=false',
                        '--data', manifest, '--out', str(out), '--seed', str(seed)]) == 0
            report = parse_report((out / REPORT_NAME).read_text())
            rank1.append(report.rank(1))
            mAP.append(report.mAP)
        assert statistics.median(rank1) >= 0.9
        assert statistics.median(mAP) >= 0.8

    def test_ablation_table(self, tmp_path):
        manifest = run_gen_toy(tmp_path)
        out = tmp_path / 'ablation'
        assert run(['ablate', '--config', str(CONFIGS / 'toy.cfg'), '--set', 'progress=false',
                    '--data', manifest, '--out', str(out)]) == 0
        lines = (out / ABLATION_NAME).read_text().splitlines()
        assert lines[0].split('\t') == ['setting', 'mAP', 'rank1', 'rank5', 'rank10']
        rows = [line.split('\t') for line in lines[1:]]
        assert [row[0] for row in rows] == ['G', 'L', 'G+L', 'G+SS1', 'G+L+CC2', 'CCAN']
        assert all(float(row[2]) >= 0.75 for row in rows)


def run_gen_toy(tmp_path):
    assert run(['gen-data', '--ids', '16', '--per-id', '8', '--cams', '2', '--seed', '7',
                '--out', str(tmp_path / 'data')]) == 0
    return str(tmp_path / 'data' / 'manifest.tsv')
