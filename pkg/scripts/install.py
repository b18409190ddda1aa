"""Creates ./venv, installs requirements.txt into it and prepares the result directories."""
import os
import subprocess
import sys
import venv

VENV_DIR = "venv"
REQUIREMENTS = "requirements.txt"


def venv_executable(name: str) -> str:
    if sys.platform == "win32":
        return os.path.join(VENV_DIR, "Scripts", f"{name}.exe")
    return os.path.join(VENV_DIR, "bin", name)


def run_step(description: str, command) -> bool:
    print(f"{description}: {' '.join(command)}")
    try:
        subprocess.run(command, check=True)
    except subprocess.CalledProcessError as e:
        print(f"  failed with exit status {e.returncode}", file=sys.stderr)
        return False
    except FileNotFoundError:
        print(f"  '{command[0]}' not found", file=sys.stderr)
        return False
    return True


def main() -> int:
    print("Starting PulseForge dependency installation...")
    if sys.version_info < (3, 9):
        print("PulseForge needs Python 3.9+", file=sys.stderr)
        return 1
    if not os.path.exists(REQUIREMENTS):
        print(f"'{REQUIREMENTS}' not found; run this script from the project root.", file=sys.stderr)
        return 1

    if os.path.isdir(VENV_DIR):
        print(f"Reusing virtual environment '{VENV_DIR}'")
    else:
        print(f"Creating virtual environment '{VENV_DIR}'")
        venv.create(VENV_DIR, with_pip=True, symlinks=sys.platform != "win32")

    python = venv_executable("python")
    steps = [
        ("Upgrading pip", [python, "-m", "pip", "install", "--upgrade", "pip"]),
        ("Installing requirements", [python, "-m", "pip", "install", "-r", REQUIREMENTS]),
        ("Preparing directories", [python, os.path.join("scripts", "setup_environment.py")]),
    ]
    for description, command in steps:
        if not run_step(description, command):
            return 1

    activate = f"{VENV_DIR}\\Scripts\\activate.bat" if sys.platform == "win32" else f"source {VENV_DIR}/bin/activate"
    print("\nInstallation complete. Activate the environment with:")
    print(f"  {activate}")
    print("then run 'python main.py continuous' or the tests with 'pytest'.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
