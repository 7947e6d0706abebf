from typing import Any, Dict, List, Union
from pathlib import Path
import json
import logging
import shutil

import numpy as np

from backend.core.cauchy_solver import Trajectory
from backend.core.errors import FieldValidationError
from backend.core.field_io import FieldDump
from backend.core.spectral_core import ComplexScalarField, RealVectorField, SpectralGrid

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"


class RunStore:
    """
    One run directory: archived config, report, series and trajectory checkpoints.

    Checkpoints live under checkpoints/<name>/ as one binary field dump per node
    and component, plus an index.json with the node times and run parameters.
    """

    def __init__(self, out_dir: Union[str, Path]):
        """Create the run directory if needed."""
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_dir = self.out_dir / "checkpoints"

    @property
    def config_path(self) -> Path:
        return self.out_dir / "config.toml"

    @property
    def report_path(self) -> Path:
        return self.out_dir / "report.json"

    @property
    def series_path(self) -> Path:
        return self.out_dir / "series.csv"

    def save_config(self, text: str) -> Path:
        """Archive the effective config next to the report."""
        self.config_path.write_text(text, encoding="utf-8")
        return self.config_path

    def save_trajectory(self, traj: Trajectory, name: str = "trajectory") -> Path:
        """Write every node of traj as field dumps and index them."""
        target = self.checkpoint_dir / name
        target.mkdir(parents=True, exist_ok=True)
        nodes: List[Dict[str, Any]] = []
        for i in range(traj.n_nodes):
            files = {
                "q": self._dump(ComplexScalarField(grid=traj.grid, values=traj.q[i]), target, f"q_{i:04d}.fld"),
                "sigma": self._dump(RealVectorField(grid=traj.grid, components=traj.sigma[i]), target, f"sigma_{i:04d}.fld"),
                "b_b": self._dump(RealVectorField(grid=traj.grid, components=traj.b_b[i]), target, f"b_b_{i:04d}.fld"),
            }
            if traj.b_a is not None:
                files["b_a"] = self._dump(
                    RealVectorField(grid=traj.grid, components=traj.b_a[i]), target, f"b_a_{i:04d}.fld"
                )
            q_stats = FieldDump.get_field_stats(ComplexScalarField(grid=traj.grid, values=traj.q[i]))
            nodes.append({"t": float(traj.times[i]), "files": files, "q_l2": q_stats["l2_norm"]})

        index = {
            "name": name,
            "grid": {"n_per_axis": traj.grid.n_per_axis, "box_length": traj.grid.box_length},
            "T": traj.T,
            "T_max": traj.T_max,
            "rho": traj.rho,
            "tail": traj.tail,
            "meta": traj.meta,
            "has_b_a": traj.b_a is not None,
            "nodes": nodes,
        }
        self._persist_index(target, index)
        logger.info(f"Checkpoint '{name}': {traj.n_nodes} nodes written to {target}")
        return target

    def load_trajectory(self, name: str = "trajectory") -> Trajectory:
        """Rebuild a trajectory from its checkpoint."""
        target = self.checkpoint_dir / name
        index = self._load_index(target)
        grid = SpectralGrid(**index["grid"])
        nodes = index["nodes"]
        times = np.array([node["t"] for node in nodes])

        def stack(key: str) -> np.ndarray:
            out = []
            for node in nodes:
                field = FieldDump.load_from_file(target / node["files"][key])
                if not field.grid.compatible(grid):
                    raise FieldValidationError(f"{node['files'][key]} does not match the checkpoint grid")
                out.append(field.values if isinstance(field, ComplexScalarField) else field.components)
            return np.array(out)

        b_a = stack("b_a") if index.get("has_b_a") else None
        return Trajectory(
            grid, times, stack("q"), stack("sigma"), stack("b_b"), b_a, index.get("tail", "profile_closure"),
            index.get("meta"),
        )

    def list_checkpoints(self) -> List[str]:
        """Names of readable checkpoints, sorted."""
        if not self.checkpoint_dir.exists():
            return []
        names = []
        for index_file in sorted(self.checkpoint_dir.glob(f"*/{INDEX_NAME}")):
            try:
                self._load_index(index_file.parent)
                names.append(index_file.parent.name)
            except (json.JSONDecodeError, KeyError) as e:
                logger.warning(f"Skipping unreadable checkpoint {index_file.parent}: {e}")
        return names

    def delete_checkpoint(self, name: str) -> bool:
        target = self.checkpoint_dir / name
        if not (target / INDEX_NAME).exists():
            return False
        shutil.rmtree(target)
        return True

    def _dump(self, field, target: Path, file_name: str) -> str:
        FieldDump.save_to_file(field, target / file_name)
        return file_name

    def _persist_index(self, target: Path, index: Dict[str, Any]) -> None:
        with open(target / INDEX_NAME, "w", encoding="utf-8") as f:
            json.dump(index, f, indent=2)

    def _load_index(self, target: Path) -> Dict[str, Any]:
        with open(target / INDEX_NAME, "r", encoding="utf-8") as f:
            index = json.load(f)
        if "nodes" not in index or "grid" not in index:
            raise KeyError(f"{target / INDEX_NAME} lacks nodes or grid")
        return index

    def clear_all(self) -> None:
        """Remove every checkpoint (for testing)."""
        if self.checkpoint_dir.exists():
            shutil.rmtree(self.checkpoint_dir)
