import { describe, expect, it } from "vitest";
import { LatestWins } from "../src/queue.js";

function deferred(): { promise: Promise<void>; resolve: () => void } {
  let resolve!: () => void;
  const promise = new Promise<void>((r) => { resolve = r; });
  return { promise, resolve };
}

describe("LatestWins", () => {
  it("runs a task immediately when idle", async () => {
    const q = new LatestWins();
    let ran = 0;
    q.submit(async () => { ran += 1; });
    await q.idle();
    expect(ran).toBe(1);
  });

  it("drops the queued task when a newer one arrives", async () => {
    const q = new LatestWins();
    const gate = deferred();
    const log: string[] = [];
    q.submit(async () => { log.push("first"); await gate.promise; });
    q.submit(async () => { log.push("second"); });
    q.submit(async () => { log.push("third"); });
    expect(q.inFlight).toBe(true);
    gate.resolve();
    await q.idle();
    expect(log).toEqual(["first", "third"]);
    expect(q.inFlight).toBe(false);
  });

  it("keeps draining after a task rejects", async () => {
    const q = new LatestWins();
    const log: string[] = [];
    q.submit(async () => { throw new Error("boom"); });
    await q.idle();
    q.submit(async () => { log.push("after"); });
    await q.idle();
    expect(log).toEqual(["after"]);
  });

  it("promotes the pending task exactly once", async () => {
    const q = new LatestWins();
    const gate = deferred();
    let later = 0;
    q.submit(async () => { await gate.promise; });
    q.submit(async () => { later += 1; });
    gate.resolve();
    await q.idle();
    expect(later).toBe(1);
  });
});
