#!/usr/bin/env python3
"""
Startup script for the GEM FastAPI server
"""

import argparse
import os
import sys
from pathlib import Path

import uvicorn


def main():
    """Start the FastAPI server"""
    parser = argparse.ArgumentParser(description="Serve the GEM generation/prediction API")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--checkpoint", help="Checkpoint served by /predict (sets GEM_CHECKPOINT)")
    parser.add_argument("--reload", action="store_true", help="Auto-reload on code changes")
    args = parser.parse_args()

    # Ensure we're in the right directory
    script_dir = Path(__file__).parent
    os.chdir(script_dir)
    if args.checkpoint:
        os.environ["GEM_CHECKPOINT"] = str(Path(args.checkpoint).resolve())

    print("Starting GEM FastAPI Server...")
    print("=" * 50)
    print(f"API Documentation: http://localhost:{args.port}/docs")
    print(f"Health Check: http://localhost:{args.port}/health")
    print(f"Predictor: {os.environ.get('GEM_CHECKPOINT', 'not configured')}")
    print("=" * 50)
    print("Press Ctrl+C to stop the server")
    print()

    try:
        uvicorn.run(
            "api:app",
            host=args.host,
            port=args.port,
            reload=args.reload,
            log_level="info"
        )
    except KeyboardInterrupt:
        print("\nServer stopped by user")
    except Exception as e:
        print(f"Error starting server: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
