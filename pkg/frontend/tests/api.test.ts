import { describe, expect, it } from "vitest";
import { ApiError, ChatApi } from "../src/api.js";

type Call = { url: string; init?: RequestInit };

function fakeFetch(
  handler: (url: string, init?: RequestInit) => Response,
): { calls: Call[]; fetchFn: (url: string, init?: RequestInit) => Promise<Response> } {
  const calls: Call[] = [];
  return {
    calls,
    fetchFn: async (url, init) => {
      calls.push({ url, init });
      return handler(url, init);
    },
  };
}

const json = (body: unknown, status = 200) =>
  new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });

describe("ChatApi", () => {
  it("posts session options and parses the response", async () => {
    const { calls, fetchFn } = fakeFetch(() =>
      json({ id: "abc", disclosure: "d", preset: "camrest", opening: null }),
    );
    const api = new ChatApi("http://svc", fetchFn);
    const created = await api.createSession({ preset: "camrest", seed: 3 });
    expect(created.id).toBe("abc");
    expect(calls[0].url).toBe("http://svc/sessions");
    expect(JSON.parse(calls[0].init!.body as string)).toEqual({
      preset: "camrest",
      seed: 3,
    });
  });

  it("sends message text to the session endpoint", async () => {
    const { calls, fetchFn } = fakeFetch(() =>
      json({ reply: "ok", turn_index: 1 }),
    );
    const api = new ChatApi("http://svc", fetchFn);
    const result = await api.sendMessage("abc", "hello");
    expect(result.reply).toBe("ok");
    expect(calls[0].url).toBe("http://svc/sessions/abc/messages");
    expect(JSON.parse(calls[0].init!.body as string)).toEqual({
      text: "hello",
    });
  });

  it("raises ApiError with the service detail on non-2xx", async () => {
    const { fetchFn } = fakeFetch(() =>
      json({ detail: "a reply is already in flight" }, 409),
    );
    const api = new ChatApi("http://svc", fetchFn);
    const error = await api.sendMessage("abc", "hi").catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect(error.status).toBe(409);
    expect(error.isBusy).toBe(true);
    expect(error.isFull).toBe(false);
  });

  it("distinguishes capacity-full from busy", () => {
    const full = new ApiError(409, "session is full; start a new session");
    expect(full.isFull).toBe(true);
    expect(full.isBusy).toBe(false);
  });

  it("returns export text verbatim", async () => {
    const line = '{"id": "abc", "turns": [["user", "hi", null]]}\n';
    const { fetchFn } = fakeFetch(
      () => new Response(line, { status: 200 }),
    );
    const api = new ChatApi("http://svc", fetchFn);
    expect(await api.exportTranscript("abc")).toBe(line);
  });

  it("health is false when the service is unreachable", async () => {
    const api = new ChatApi("http://svc", async () => {
      throw new Error("connection refused");
    });
    expect(await api.health()).toBe(false);
  });
});
