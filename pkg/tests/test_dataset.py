import json

import numpy as np
import pytest

from splitpipe.dataset import (
    dumps_dataset,
    generate_dataset,
    label_model,
    load_dataset,
    save_dataset,
    split_train_test,
)
from splitpipe.errors import DomainError, EmptyDataset, InputError, ParseError
from splitpipe.model_zoo import build_reference
from splitpipe.pipeline import TransferPath, optimal_split, stage_curve


@pytest.fixture(scope="module")
def records(profiles):
    return generate_dataset(100, 0, *profiles)


def test_round_trip_100(records, tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(records, path)
    loaded = load_dataset(path)
    assert loaded == records
    assert dumps_dataset(loaded) == path.read_text()
    assert len(path.read_text().splitlines()) == 100


def test_truncated_line_reports_line(records, tmp_path):
    lines = dumps_dataset(records[:3]).splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        load_dataset(path)
    assert exc.value.line == 2


def test_empty_file_is_empty_list(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_dataset(tmp_path / "absent.jsonl")


def test_labels_match_optimal_split(records, profiles):
    dpu, gpu, link = profiles
    for r in records:
        assert r.sample.optimal_index == optimal_split(r.model, dpu, gpu, link).split_index
        np.testing.assert_array_equal(r.sample.steady_curve(),
                                      stage_curve(r.model, dpu, gpu, link).steady)
        assert r.provenance["generator_seed"] == int(r.model.name.split("-")[1])


def test_label_model_on_reference(profiles):
    m = build_reference("resnet18")
    for path in TransferPath:
        s = label_model(m, *profiles, path)
        assert s.n_units == len(m.units) and s.path is path
        assert s.optimal_index == optimal_split(m, *profiles, path).split_index


def test_tampered_label_rejected(records, tmp_path):
    d = records[0].to_dict()
    steady = records[0].sample.steady_curve()
    d["sample"]["optimal_index"] = int(np.argmax(steady))
    path = tmp_path / "t.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(DomainError):
        load_dataset(path)
    assert len(load_dataset(path, verify=False)) == 1


def test_split_disjoint_exhaustive():
    items = list(range(1000))
    train, test = split_train_test(items, 0.8, 0)
    assert len(train) == 800 and len(test) == 200
    assert set(train).isdisjoint(test) and set(train) | set(test) == set(items)
    assert split_train_test(items, 0.8, 0) == (train, test)
    assert split_train_test(items, 0.8, 1) != (train, test)


def test_split_validation():
    with pytest.raises(EmptyDataset):
        split_train_test([], 0.8, 0)
    with pytest.raises(InputError):
        split_train_test([1, 2], 1.0, 0)


def test_generation_deterministic(profiles):
    a = dumps_dataset(generate_dataset(5, 42, *profiles))
    assert a == dumps_dataset(generate_dataset(5, 42, *profiles))
    assert a != dumps_dataset(generate_dataset(5, 43, *profiles))


def test_generate_rejects_empty(profiles):
    with pytest.raises(InputError):
        generate_dataset(0, 0, *profiles)
