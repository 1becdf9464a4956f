import logging
from pathlib import Path

import yaml

logger = logging.getLogger("depthseg")


class RunContext:
    """Output directory of one subcommand run: frozen config, artifact list, run manifest."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.artifacts = []
        self.summary = {}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config_path = cfg.write_frozen(self.out_dir)

    def path(self, *parts):
        path = self.out_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def record(self, path):
        if path is not None:
            self.artifacts.append(str(Path(path)))
        return path

    def finish(self):
        manifest = {
            "subcommand": self.cfg.subcommand,
            "seed": self.cfg.seed,
            "config": str(self.config_path),
            "artifacts": sorted(set(self.artifacts)),
            "summary": self.summary,
        }
        path = self.out_dir / "run_manifest.yaml"
        with open(path, "w") as fh:
            yaml.safe_dump(manifest, fh, sort_keys=True)
        logger.info(f"{self.cfg.subcommand}: {len(manifest['artifacts'])} artifacts, manifest at {path}")
        return path
