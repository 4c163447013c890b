"""
Tests for manifests, raster I/O, run configuration and the schema documents.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from core.config import (
    RUN_CONFIG_NAME,
    RUN_MANIFEST_NAME,
    build_run_config,
    config_from_dict,
    config_to_dict,
    deep_merge,
    load_config_file,
    write_run_manifest,
)
from core.dataset_io import (
    Guardrails,
    load_sections,
    read_manifest,
    read_probability_map,
    read_regions,
    resolve_manifest_path,
    save_section,
    write_json,
    write_manifest,
    write_probability_map,
    write_regions,
)
from core.domain import LABEL_DENSE, ProbabilityMap, Resolution
from core.errors import ConfigError, DatasetIOError, ManifestError
from core.geometry import connected_components
from flows.training_flow import TrainConfig

DOCS = Path(__file__).resolve().parent.parent / 'docs'


def valid_entry(**overrides):
    entry = {
        'id': 's0',
        'macaque_id': 'm0',
        'rostrocaudal_index': 0,
        'image': 'images/s0.png',
        'resolution': {'microns_per_pixel': 1.6, 'section_gap_um': 400.0},
        'charted': False,
        'charting': None,
        'split': 'train',
    }
    entry.update(overrides)
    return entry


class TestGuardrails:
    """Manifest validation."""

    def test_valid_entry(self):
        assert Guardrails.validate_entry(valid_entry()) == []

    def test_missing_field(self):
        entry = valid_entry()
        del entry['resolution']
        assert any('resolution' in issue for issue in Guardrails.validate_entry(entry))

    def test_charting_consistency(self):
        assert Guardrails.validate_entry(valid_entry(charted=True))
        assert Guardrails.validate_entry(valid_entry(charting='labels/s0.png'))

    def test_bad_resolution_and_split(self):
        assert Guardrails.validate_entry(valid_entry(resolution={'microns_per_pixel': 0, 'section_gap_um': 400}))
        assert Guardrails.validate_entry(valid_entry(split='validation'))

    def test_duplicate_ids(self):
        issues = Guardrails.validate_manifest([valid_entry(), valid_entry()])
        assert any('duplicate' in issue for issue in issues)

    def test_manifest_must_be_list(self):
        assert Guardrails.validate_manifest({'id': 's0'})

    def test_schema_required_fields_match(self):
        with open(DOCS / 'manifest.schema.json', 'r', encoding='utf-8') as f:
            schema = json.load(f)
        assert set(schema['items']['required']) == set(Guardrails.REQUIRED_FIELDS)


class TestManifestFiles:
    """Reading and writing manifests and section rasters."""

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'manifest.json'
        path.write_text('{not json', encoding='utf-8')
        with pytest.raises(ManifestError):
            read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_manifest(tmp_path / 'absent.json')

    def test_write_manifest_refuses_invalid(self, tmp_path):
        with pytest.raises(ManifestError):
            write_manifest([{'id': 's0'}], tmp_path / 'manifest.json')

    def test_directory_resolves_to_manifest(self, tmp_path):
        assert resolve_manifest_path(tmp_path) == tmp_path / 'manifest.json'

    def test_data_root_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv('FIBERDETECT_DATA_ROOT', str(tmp_path))
        assert resolve_manifest_path(Path('some-dataset-that-does-not-exist')) == \
            tmp_path / 'some-dataset-that-does-not-exist'

    def test_section_round_trip(self, tmp_path, section_factory, rng):
        charting = np.zeros((32, 32), np.uint8)
        charting[4:10, 4:12] = LABEL_DENSE
        ventricle = np.zeros((32, 32), bool)
        ventricle[20:24, 20:24] = True
        section = section_factory((32, 32), charting=charting, rng=rng, ventricle_mask=ventricle, split='test')
        entry = save_section(section, tmp_path)
        write_manifest([entry], tmp_path / 'manifest.json')

        (loaded,) = load_sections(tmp_path, split='test')
        np.testing.assert_array_equal(loaded.image, section.image)
        np.testing.assert_array_equal(loaded.charting, charting)
        np.testing.assert_array_equal(loaded.ventricle_mask, ventricle)
        assert loaded.tissue_mask is None
        np.testing.assert_allclose(loaded.resolution.microns_per_pixel, 16.0)
        assert load_sections(tmp_path, split='train') == []

    def test_sections_sorted(self, tmp_path, section_factory):
        entries = [save_section(section_factory((8, 8), section_id=f's{i}', index=i), tmp_path)
                   for i in (2, 0, 1)]
        write_manifest(entries, tmp_path / 'manifest.json')
        assert [s.rostrocaudal_index for s in load_sections(tmp_path)] == [0, 1, 2]


class TestOutputs:
    """Probability maps, regions and JSON stability."""

    def test_probability_map_round_trip(self, tmp_path, rng):
        prob = ProbabilityMap(rng.random((20, 30)).astype(np.float32), 's0')
        path = write_probability_map(prob, tmp_path / 'prob' / 's0.tif')
        np.testing.assert_array_equal(read_probability_map(path, 's0').values, prob.values)

    def test_regions_round_trip(self, tmp_path, rng):
        regions = connected_components(rng.random((20, 20)) > 0.8, Resolution())
        path = write_regions(regions, tmp_path / 'r.json', 's0')
        restored = read_regions(path)
        assert [r.pixel_set() for r in restored] == [r.pixel_set() for r in regions]

    def test_write_json_is_byte_stable(self, tmp_path):
        a = write_json(tmp_path / 'a.json', {'b': 1, 'a': [1.5, None]})
        b = write_json(tmp_path / 'b.json', {'a': [1.5, None], 'b': 1})
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes().endswith(b'\n')


class TestRunConfig:
    """Layered configuration."""

    def test_deep_merge(self):
        merged = deep_merge({'a': {'x': 1, 'y': 2}, 'b': 1}, {'a': {'y': 3}})
        assert merged == {'a': {'x': 1, 'y': 3}, 'b': 1}

    def test_nested_dataclass_round_trip(self):
        data = config_to_dict(TrainConfig())
        data['unet']['base_width'] = 8
        data['tile']['tile_size'] = 512
        cfg = config_from_dict(TrainConfig, data)
        assert cfg.unet.base_width == 8
        assert cfg.tile.tile_size == 512
        assert cfg.arm.fc_sizes == (1024, 256)

    def test_invalid_value_raises(self):
        with pytest.raises(ConfigError):
            config_from_dict(TrainConfig, {'r': 0})

    def test_precedence(self):
        run_config = build_run_config(
            {'seed': 0, 'sections': {'train': {'batch_size': 8, 'r': 3}}},
            {'sections': {'train': {'batch_size': 4}}},
            {'seed': 7, 'sections': {'train': {'r': 5}}},
        )
        assert run_config.seed == 7
        assert run_config.section('train') == {'batch_size': 4, 'r': 5}

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(ManifestError):
            load_config_file(tmp_path / 'missing.json')
        bad = tmp_path / 'bad.json'
        bad.write_text('[1, 2]', encoding='utf-8')
        with pytest.raises(ManifestError):
            load_config_file(bad)

    def test_run_manifest(self, tmp_path):
        source = tmp_path / 'input.json'
        source.write_text('{}', encoding='utf-8')
        run_config = build_run_config({'seed': 1}, {}, {})
        write_run_manifest(tmp_path / 'out', run_config, 'fiberdetect synth', [source])
        with open(tmp_path / 'out' / RUN_MANIFEST_NAME, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        assert str(source) in manifest['inputs']
        assert (tmp_path / 'out' / RUN_CONFIG_NAME).is_file()
