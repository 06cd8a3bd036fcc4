"""
Unit tests for argcomplete completer functions.
"""

from argparse import Namespace
from unittest.mock import MagicMock, patch

from odflow.completers import cell_completer, config_file_completer
from odflow.ingest import ComponentSpec
from odflow.io.cache import write_component


class TestCellCompleter:
    """Tests for cell_completer function."""

    def test_cell_completer_from_manifest(self, tiny_files):
        """Test cell_completer lists every cell of the --cells manifest."""
        _, cells = tiny_files
        parsed_args = Namespace(cells=str(cells), cache=None)

        result = cell_completer("", parsed_args)

        assert result == ["a", "b", "c"]

    def test_cell_completer_with_prefix(self, tmp_path):
        """Test cell_completer filters by prefix."""
        manifest = tmp_path / "cells.csv"
        manifest.write_text("cell_id,lat,lon\ndn5bp,33.7,-84.4\ndn5bq,33.7,-84.3\ndjgzz,33.6,-84.5\n")
        parsed_args = Namespace(cells=str(manifest), cache=None)

        result = cell_completer("dn5", parsed_args)

        # Should only return cells starting with "dn5"
        assert result == ["dn5bp", "dn5bq"]

    def test_cell_completer_from_cache(self, tmp_path):
        """Test cell_completer falls back to the cached component."""
        write_component(ComponentSpec(cells=("x1", "x2"), t_range=(0, 3)), tmp_path / "component.json")
        parsed_args = Namespace(cells=None, cache=str(tmp_path))

        result = cell_completer("", parsed_args)

        assert result == ["x1", "x2"]

    def test_cell_completer_without_sources(self, tmp_path):
        """Test cell_completer returns empty list when there is nothing to read."""
        parsed_args = Namespace(cells=None, cache=str(tmp_path / "missing"))

        assert cell_completer("", parsed_args) == []

    @patch("odflow.geo.load_cells")
    def test_cell_completer_load_error(self, mock_load_cells):
        """Test cell_completer returns empty list when the manifest cannot be read."""
        # Simulate a broken manifest
        mock_load_cells.side_effect = Exception("bad manifest")

        parsed_args = Namespace(cells="cells.csv", cache=None)

        # Should return empty list on error
        assert cell_completer("", parsed_args) == []


class TestConfigFileCompleter:
    """Tests for config_file_completer function."""

    @patch("odflow.completers.FilesCompleter")
    def test_config_file_completer(self, mock_files_completer):
        """Test config_file_completer delegates to FilesCompleter."""
        # Setup mock
        mock_completer_instance = MagicMock()
        mock_completer_instance.return_value = ["/path/to/odflow.yaml", "/path/to/atlanta.yaml"]
        mock_files_completer.return_value = mock_completer_instance

        parsed_args = Namespace()

        # Call completer
        result = config_file_completer("/path/to/", parsed_args)

        # Verify FilesCompleter was used
        mock_files_completer.assert_called_once()
        assert result == ["/path/to/odflow.yaml", "/path/to/atlanta.yaml"]
