import io
from pathlib import Path

import numpy as np
import pytest

from attnquant.utils.records import PowerEncoder, RecordWriter, dumps, read_records
from attnquant.utils.units import ureg


class Test_PowerEncoder:
    @pytest.fixture
    def encoder(self) -> PowerEncoder:
        return PowerEncoder()

    def test_numpy_number(self, encoder):
        assert encoder.encode(np.array((5, 7.5), dtype=np.float16)) == "[5.0, 7.5]"

    def test_numpy_scalars(self, encoder):
        assert encoder.encode([np.int64(3), np.float32(0.5), np.bool_(True)]) == "[3, 0.5, true]"

    def test_pint(self, encoder):
        assert encoder.encode(5 * ureg.cm) == '"5 cm"'

    def test_path(self, encoder):
        assert encoder.encode(Path("a") / "b.aqm") == '"a/b.aqm"'

    def test_combination(self, encoder):
        assert encoder.encode([np.array((5, 7.5), dtype=np.float16), 7.25 * ureg.km,
                               9]) == '[[5.0, 7.5], "7.25 km", 9]'

    def test_unknown(self, encoder):
        with pytest.raises(TypeError):
            encoder.encode(object())


def test_dumps_sorted_and_compact():
    assert dumps({"b": 1, "a": np.float64(0.25)}) == '{"a":0.25,"b":1}'


class Test_RecordWriter:
    def test_stream(self):
        stream = io.StringIO()
        writer = RecordWriter(stream)
        writer.write_all([{"record": "layer", "bits": np.int64(4)}, {"record": "totals"}])
        assert stream.getvalue() == '{"bits":4,"record":"layer"}\n{"record":"totals"}\n'
        assert len(writer.records) == 2

    def test_file(self, tmp_path):
        path = tmp_path / "records.jsonl"
        with RecordWriter(path) as writer:
            writer.write({"layer_id": "blocks.0.wq", "error": 1e-3})
        assert read_records(path) == [{"layer_id": "blocks.0.wq", "error": 1e-3}]

    def test_memory_only(self):
        writer = RecordWriter()
        writer.write({"a": 1})
        writer.close()
        assert writer.records == [{"a": 1}]
