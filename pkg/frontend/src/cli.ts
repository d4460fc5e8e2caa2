/**
 * Extractor CLI.
 *
 *   node dist/cli.js extract --job job.json [--raw]
 *
 * The job file holds {backbone, dataset_dir, out, token_kinds?, splits?,
 * raw?}. Exit codes: 0 success, 2 usage or job-file error, 3 runtime
 * failure. The manifest (output sha256 and shapes) prints to stdout.
 */

import { parseArgs } from "node:util";

import { extract, parseJob } from "./extract.js";

function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (command !== "extract") {
    console.error(`usage: cli.js extract --job <job.json> [--raw]`);
    return 2;
  }
  let values;
  try {
    ({ values } = parseArgs({
      args: rest,
      options: {
        job: { type: "string" },
        raw: { type: "boolean", default: false },
      },
    }));
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
  if (!values.job) {
    console.error("error: --job is required");
    return 2;
  }
  let job;
  try {
    job = parseJob(values.job);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
  if (values.raw) job.raw = true;
  try {
    const manifest = extract(job);
    console.log(JSON.stringify(manifest, null, 2));
    return 0;
  } catch (err) {
    const message = (err as Error).message;
    if (/unknown backbone|token kind|no split|contains no|missing/.test(message)) {
      console.error(`error: ${message}`);
      return 2;
    }
    console.error(`runtime failure: ${message}`);
    return 3;
  }
}

process.exit(main(process.argv.slice(2)));
