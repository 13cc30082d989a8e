#!/usr/bin/env python3
"""
Startup script for the impulse-control toolkit
Loads impulse_config.env if it exists, then hands over to the CLI
"""
import sys
from pathlib import Path

from dotenv import load_dotenv

from config import ENV_FILE


def main():
    """Main startup function"""
    env_file = Path(ENV_FILE)
    if env_file.exists():
        load_dotenv(env_file)
        print(f"📄 Loaded defaults from {env_file}", file=sys.stderr)
    else:
        print(f"⚠️  No {env_file} found, using system environment variables", file=sys.stderr)

    try:
        from cli import main as cli_main
        sys.exit(cli_main(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\n👋 Run interrupted by user", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    main()
