import subprocess
from pathlib import Path


def run_prescope(
    cwd: Path,
    *args: str | Path,
    expected_returncode: int = 0,
) -> subprocess.CompletedProcess[str]:
    result = subprocess.run(
        ["prescope", "-v", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
        check=False,
    )
    assert result.returncode == expected_returncode, result.stderr
    return result


def run_with_config(
    cwd: Path,
    config_filename: str,
    *args: str | Path,
    expected_returncode: int = 0,
) -> subprocess.CompletedProcess[str]:
    config_path = (cwd / "test_configs" / config_filename).resolve(strict=True)
    return run_prescope(cwd, *args, "-f", config_path, expected_returncode=expected_returncode)


def assert_files_exist(output_path: Path, files: list[str]) -> None:
    for file in files:
        file_path = (output_path / file).absolute()
        assert file_path.exists(), f"{file_path} does not exist"


def assert_file_contains(file_path: Path, expected_content: list[str]) -> None:
    with file_path.open() as file:
        content = file.read()
        for substring in expected_content:
            assert substring in content, f"{substring} not found in {file_path}"


def read_csv_header(file_path: Path) -> list[str]:
    with file_path.open() as file:
        return file.readline().rstrip("\n").split(",")


def output_text(result: subprocess.CompletedProcess[str]) -> str:
    # Rich wraps log lines to the terminal width
    return " ".join((result.stdout + result.stderr).split())
