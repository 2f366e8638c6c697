"""Records the build commit in git-hash.txt, read by protofed.wrapper_version()."""
import subprocess
from pathlib import Path


def _git(*args: str) -> str:
    return subprocess.check_output(["git", *args], cwd=Path(__file__).parent,
                                   stderr=subprocess.DEVNULL).decode("ascii").strip()


def get_git_commit_hash() -> str:
    try:
        commit = _git("rev-parse", "--short=12", "HEAD")
        dirty = _git("status", "--porcelain", "--untracked-files=no")
    except (subprocess.CalledProcessError, FileNotFoundError):
        return "unknown"
    return f"{commit}-dirty" if dirty else commit


if __name__ == "__main__":
    target = Path(__file__).parent / "git-hash.txt"
    target.write_text(f"{get_git_commit_hash()}\n")
    print(f"{target.name} created.")
