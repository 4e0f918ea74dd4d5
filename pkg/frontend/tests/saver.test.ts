import { describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import { LabelRaster } from "../src/labels.js";
import { LabelSaver } from "../src/saver.js";
import { FakeServer, jsonResponse, pngResponse } from "./fake.js";

function raster(fill: number): LabelRaster {
  const r = new LabelRaster(4, 4);
  r.data.fill(fill);
  return r;
}

function labelServer() {
  const server = new FakeServer();
  let stored = raster(0);
  const posts: Uint8Array[] = [];
  server.on("GET", "/projects/demo/tiles/t0000/labels",
            () => pngResponse(stored.toGrayPng()));
  server.on("POST", "/projects/demo/tiles/t0000/labels", (req) => {
    posts.push(req.body as Uint8Array);
    stored = LabelRaster.fromGrayPng(req.body as Uint8Array);
    return jsonResponse({
      event_id: posts.length, kind: req.headers["x-edit-kind"] ?? "stroke",
      pixels_changed: 0, structures: 0,
    });
  });
  return {
    server,
    posts,
    get stored() { return stored; },
    set stored(r: LabelRaster) { stored = r; },
  };
}

describe("save pipeline", () => {
  it("saves and updates the baseline", async () => {
    const env = labelServer();
    const saver = new LabelSaver(new Client("", env.server.fetch), "demo");
    saver.setBaseline("t0000", raster(0));
    const out = await saver.save("t0000", raster(2), "stroke");
    expect(out.conflict).toBeNull();
    expect(out.result?.event_id).toBe(1);
    expect(env.stored.data[0]).toBe(2);
    expect(saver.baselineOf("t0000")?.data[0]).toBe(2);
  });

  it("coalesces queued saves to the newest raster", async () => {
    const env = labelServer();
    // hold the first POST until released so later saves stack up
    let release!: () => void;
    const held = new Promise<void>((r) => { release = r; });
    const orig = env.server.routes.get(
      "POST /projects/demo/tiles/t0000/labels")!;
    let first = true;
    env.server.on("POST", "/projects/demo/tiles/t0000/labels", async (req) => {
      if (first) {
        first = false;
        await held;
      }
      return orig(req);
    });

    const saver = new LabelSaver(new Client("", env.server.fetch), "demo");
    saver.setBaseline("t0000", raster(0));
    const p1 = saver.save("t0000", raster(1), "stroke");
    // wait until save 1 is actually in flight before stacking more
    await new Promise((r) => setTimeout(r, 10));
    const p2 = saver.save("t0000", raster(2), "stroke");
    const p3 = saver.save("t0000", raster(1), "erase");
    release();
    const [o1, o2, o3] = await Promise.all([p1, p2, p3]);
    expect(o1.conflict).toBeNull();
    expect(o2.conflict).toBeNull();
    expect(o3.conflict).toBeNull();
    // two POSTs: the in-flight one and one coalesced save carrying raster 3
    expect(env.posts.length).toBe(2);
    expect(LabelRaster.fromGrayPng(env.posts[1]).data[0]).toBe(1);
    expect(env.stored.data[0]).toBe(1);
    // both queued callers saw the same (coalesced) save result
    expect(o2.result?.event_id).toBe(o3.result?.event_id);
  });

  it("detects another writer and refuses to overwrite", async () => {
    const env = labelServer();
    const saver = new LabelSaver(new Client("", env.server.fetch), "demo");
    saver.setBaseline("t0000", raster(0));
    env.stored = raster(2); // someone else wrote since our load
    const out = await saver.save("t0000", raster(1), "stroke");
    expect(out.result).toBeNull();
    expect(out.conflict?.data[0]).toBe(2);
    expect(env.posts.length).toBe(0); // nothing was overwritten
  });

  it("saves without a baseline skip the stale check", async () => {
    const env = labelServer();
    const saver = new LabelSaver(new Client("", env.server.fetch), "demo");
    const out = await saver.save("t0000", raster(1), "stroke");
    expect(out.conflict).toBeNull();
    expect(env.posts.length).toBe(1);
  });
});
