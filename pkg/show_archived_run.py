from dotenv import load_dotenv
load_dotenv()

import os
import sys

import utils


def main():
    database_url = os.environ.get("DATABASE_URL", utils.DEFAULT_DATABASE_URL)
    print(f"Using DATABASE_URL: {database_url[:60]}...", flush=True)  # don't print full URL in logs

    conn = utils.get_db_connection()
    conn.close()

    run_keys = utils.get_run_keys()
    if not run_keys:
        print("⚠️ No archived runs", flush=True)
        return 1
    run_key = sys.argv[1] if len(sys.argv) > 1 else run_keys[-1]
    if run_key not in run_keys:
        print(f"⛔ Unknown run {run_key!r}; archived: {', '.join(run_keys)}", flush=True)
        return 1

    df = utils.get_report_data(run_key)
    print(f"✅ {run_key}: {len(df)} rows", flush=True)
    print(df.to_string(index=False), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
