"""
Tests for the command-line surface: exit codes, input checks, overrides and a smoke pipeline.
"""

import json

import pytest

from main import COMMANDS, RUNTIME_ERROR, USAGE_ERROR, build_parser, cli_overrides, run


class TestArguments:
    """Parsing and usage errors."""

    def test_help_exits_zero(self, capsys):
        assert run(['--help']) == 0
        assert 'synth' in capsys.readouterr().out

    def test_subcommand_help(self, capsys):
        assert run(['froc', '--help']) == 0
        assert '--filtered' in capsys.readouterr().out

    def test_unknown_command(self):
        assert run(['explode']) == USAGE_ERROR

    def test_missing_required_flag(self, tmp_path):
        assert run(['eval', '--out', str(tmp_path)]) == USAGE_ERROR

    def test_missing_manifest_is_named(self, tmp_path, capsys):
        pred = tmp_path / 'pred'
        pred.mkdir()
        code = run(['eval', '--pred', str(pred), '--manifest', str(tmp_path / 'absent.json'),
                    '--out', str(tmp_path / 'out')])
        assert code == USAGE_ERROR
        assert '--manifest' in capsys.readouterr().err

    def test_invalid_manifest(self, tmp_path, capsys):
        pred = tmp_path / 'pred'
        pred.mkdir()
        manifest = tmp_path / 'manifest.json'
        manifest.write_text('not json', encoding='utf-8')
        code = run(['eval', '--pred', str(pred), '--manifest', str(manifest), '--out', str(tmp_path / 'out')])
        assert code == USAGE_ERROR
        assert 'Invalid input' in capsys.readouterr().err

    def test_invalid_config_value(self, tmp_path):
        config = tmp_path / 'config.json'
        config.write_text(json.dumps({'sections': {'synth': {'n_sections': 0}}}), encoding='utf-8')
        assert run(['synth', '--out', str(tmp_path / 'data'), '--config', str(config)]) == USAGE_ERROR

    def test_invalid_tile_threshold_is_usage_error(self, tmp_path, capsys):
        manifest = tmp_path / 'manifest.json'
        manifest.write_text('[]', encoding='utf-8')
        checkpoint = tmp_path / 'model.ckpt'
        checkpoint.write_bytes(b'')
        code = run(['infer', '--checkpoint', str(checkpoint), '--manifest', str(manifest),
                    '--out', str(tmp_path / 'out'), '--threshold', '1.5'])
        assert code == USAGE_ERROR
        assert 'Invalid configuration' in capsys.readouterr().err

    def test_value_error_inside_command_is_runtime_error(self, tmp_path, monkeypatch, capsys):
        def failing(args, run_config):
            raise ValueError('fp_avg needs at least one section')

        monkeypatch.setitem(COMMANDS, 'synth', failing)
        assert run(['synth', '--out', str(tmp_path / 'data'), '--tiny']) == RUNTIME_ERROR
        assert 'needs at least one section' in capsys.readouterr().err

    def test_missing_detections_is_runtime_error(self, tmp_path):
        manifest = tmp_path / 'manifest.json'
        manifest.write_text('[]', encoding='utf-8')
        detections = tmp_path / 'det'
        detections.mkdir()
        code = run(['filter', '--detections', str(detections), '--manifest', str(manifest),
                    '--out', str(tmp_path / 'out'), '--oracle-prior'])
        assert code == RUNTIME_ERROR


class TestOverrides:
    """Command-line values layered over the configuration."""

    def test_tiny_and_explicit_values(self, tmp_path):
        args = build_parser().parse_args(['train', '--manifest', 'm', '--out', str(tmp_path), '--tiny',
                                          '--te-epochs', '1', '--seed', '7'])
        overrides = cli_overrides(args)
        assert overrides['seed'] == 7
        train = overrides['sections']['train']
        assert train['te_epochs'] == 1 and train['patience'] == 1
        assert train['unet'] == {'base_width': 8}

    def test_pair_offset(self, tmp_path):
        args = build_parser().parse_args(['train', '--manifest', 'm', '--out', str(tmp_path), '--tiny'])
        assert cli_overrides(args)['sections']['train']['pair'] == {'max_crop_offset_um': 200.0}
        args = build_parser().parse_args(['train', '--manifest', 'm', '--out', str(tmp_path), '--tiny',
                                          '--pair-offset-um', '40'])
        assert cli_overrides(args)['sections']['train']['pair'] == {'max_crop_offset_um': 40.0}

    def test_threshold_and_tile(self, tmp_path):
        args = build_parser().parse_args(['infer', '--checkpoint', 'c', '--manifest', 'm', '--out', str(tmp_path),
                                          '--threshold', '0.3', '--tile-size', '256'])
        assert cli_overrides(args)['sections']['train']['tile'] == {'threshold': 0.3, 'tile_size': 256}


@pytest.mark.slow
class TestPipeline:
    """synth -> train -> infer -> eval -> filter -> froc on the tiny preset."""

    def test_tiny_pipeline(self, tmp_path):
        data = tmp_path / 'data'
        assert run(['synth', '--out', str(data), '--tiny', '--seed', '1']) == 0
        assert (data / 'manifest.json').is_file()
        assert (data / 'run_manifest.json').is_file()

        assert run(['train', '--manifest', str(data), '--out', str(tmp_path / 'train'), '--tiny']) == 0
        checkpoint = tmp_path / 'train' / 'model.ckpt'
        assert checkpoint.is_file()

        assert run(['infer', '--checkpoint', str(checkpoint), '--manifest', str(data),
                    '--out', str(tmp_path / 'infer')]) == 0
        assert run(['eval', '--pred', str(tmp_path / 'infer'), '--prob', str(tmp_path / 'infer'),
                    '--manifest', str(data), '--out', str(tmp_path / 'eval')]) == 0
        with open(tmp_path / 'eval' / 'metrics.json', 'r', encoding='utf-8') as f:
            metrics = json.load(f)
        assert metrics['n_sections'] == 2

        assert run(['filter', '--detections', str(tmp_path / 'infer'), '--manifest', str(data),
                    '--out', str(tmp_path / 'filtered'), '--oracle-prior']) == 0
        assert run(['froc', '--prob', str(tmp_path / 'infer'), '--manifest', str(data),
                    '--out', str(tmp_path / 'froc'), '--filtered', '--oracle-prior']) == 0
        assert (tmp_path / 'froc' / 'froc.svg').is_file()

    def test_filtered_froc_needs_prior(self, tmp_path):
        data = tmp_path / 'data'
        assert run(['synth', '--out', str(data), '--tiny']) == 0
        prob = tmp_path / 'prob'
        prob.mkdir()
        assert run(['froc', '--prob', str(prob), '--manifest', str(data), '--out', str(tmp_path / 'froc'),
                    '--filtered']) == USAGE_ERROR
