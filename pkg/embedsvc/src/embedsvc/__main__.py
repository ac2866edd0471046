"""Run the service: ``python -m embedsvc [--host H] [--port P]``."""

import argparse

import uvicorn

from .app import create_app


def main():
    parser = argparse.ArgumentParser(prog="embedsvc")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8001)
    args = parser.parse_args()
    uvicorn.run(create_app(), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
