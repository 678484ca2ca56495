from pathlib import Path


def field_csv(out_dir, step):
    return Path(out_dir) / f"fields_{step:04d}.csv"


def field_vtk(out_dir, step):
    return Path(out_dir) / f"fields_{step:04d}.vtk"


def convergence_log(out_dir):
    return Path(out_dir) / "convergence.csv"


def manifest(out_dir):
    return Path(out_dir) / "manifest.ini"


def admissibility(out_dir):
    return Path(out_dir) / "admissibility.txt"


def error_report(out_dir, case_id):
    slug = "".join(c if c.isalnum() else "_" for c in case_id)
    return Path(out_dir) / f"errors_{slug}.csv"


def env_file():
    return Path.cwd() / ".env"


def log_level_variable():
    return "DDLSCHEME_LOG_LEVEL"
