import pytest

from plugin_testutil import natural_array, save_png


@pytest.fixture()
def input_png(tmp_path):
    path = tmp_path / "input.png"
    save_png(natural_array(1), path)
    return str(path)
