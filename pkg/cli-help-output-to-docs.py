#!/usr/bin/env python3

import re
import subprocess
from pathlib import Path

################################################################################

files = ["README.md"]
commands = ["run-experiment"]

################################################################################


def replace_content(
    content: str,
    start_marker: str,
    end_marker: str,
    new_content: str,
) -> str:
    pattern = f"{start_marker}.*?{end_marker}"
    replacement = f"{start_marker}\n```text\n{new_content}\n```\n{end_marker}"
    return re.sub(pattern, replacement, content, flags=re.DOTALL)


def help_output(*args: str) -> str:
    return subprocess.check_output(
        ["poetry", "run", "prescope", *args, "-h"],
        universal_newlines=True,
    )


################################################################################

outputs = {"no-command": help_output()}
outputs.update({command: help_output(command) for command in commands})

for file_path in files:
    file = Path(file_path)

    content = file.read_text()
    for name, output in outputs.items():
        content = replace_content(content, f"<!-- output-{name} -->", f"<!-- /output-{name} -->", output)

    file.write_text(content)

    print(f"Updated {file}")
