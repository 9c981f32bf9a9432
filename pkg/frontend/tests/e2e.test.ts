/** End-to-end: UI state machine against a live service process.
 *
 * Starts the Python chat service with a throwaway model, runs three
 * exchanges through ChatSession, checks the rendered thread against
 * GET /history, and re-ingests the exported transcript with the eval CLI.
 */

import { execFile, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ChatApi } from "../src/api.js";
import { ChatSession } from "../src/state.js";

const execFileAsync = promisify(execFile);
const here = dirname(fileURLToPath(import.meta.url));
const PORT = 8731;
const BASE = `http://127.0.0.1:${PORT}`;

let service: ChildProcess;
let workdir: string;

async function waitForHealth(api: ChatApi, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (await api.health()) return;
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error("service did not become healthy in time");
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "chat-e2e-"));
  service = spawn(
    "python3",
    [join(here, "serve_fixture.py"), workdir, String(PORT)],
    { stdio: "inherit" },
  );
  await waitForHealth(new ChatApi(BASE), 60_000);
}, 90_000);

afterAll(() => {
  service?.kill();
});

describe("end-to-end chat", () => {
  it(
    "start, three exchanges, export, re-ingest via the eval CLI",
    async () => {
      const api = new ChatApi(BASE);
      const session = new ChatSession(api);
      await session.start("default", 13);
      expect(session.status).toBe("online");
      expect(session.disclosure).toContain("machine agent");

      for (const text of [
        "hello there",
        "what is the phone number",
        "it is hello",
      ]) {
        session.send(text);
        while (session.inputDisabled) {
          await new Promise((r) => setTimeout(r, 50));
        }
      }
      expect(session.bubbles).toHaveLength(6);

      // rendered history equals GET /history
      const history = await api.history(session.sessionId!);
      expect(session.bubbles.map((b) => [b.role, b.text])).toEqual(
        history.turns.map((t) => [t.role, t.text]),
      );

      // exported JSONL is byte-identical to the service export and feeds
      // the eval CLI without error
      const exported = await session.exportTranscript();
      expect(exported).toBe(await api.exportTranscript(session.sessionId!));
      const record = JSON.parse(exported.trim());
      expect(record.turns).toHaveLength(6);

      const corpusPath = join(workdir, "export.jsonl");
      writeFileSync(corpusPath, exported);
      const { stdout } = await execFileAsync("ardm", [
        "eval",
        "--checkpoint",
        join(workdir, "checkpoints", "default"),
        "--corpus",
        corpusPath,
        "--skip-generation",
      ]);
      expect(stdout).toContain("ppl");
    },
    120_000,
  );
});
