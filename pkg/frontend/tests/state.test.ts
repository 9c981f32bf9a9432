import { describe, expect, it } from "vitest";
import { ChatApi } from "../src/api.js";
import { ChatSession, controlsForPreset } from "../src/state.js";

/** In-memory stand-in for the dialog service, driven through fetch. */
class FakeService {
  turns: Array<{ role: string; text: string }> = [];
  opening: string | null = null;
  busyResponses = 0; // next N message posts answer 409 busy
  fullAfter = Infinity; // user turns accepted before the session fills
  offline = false;
  replyFor = (text: string) => `re: ${text}`;
  messagePosts = 0;

  fetchFn = async (url: string, init?: RequestInit): Promise<Response> => {
    if (this.offline) throw new Error("connection refused");
    const json = (body: unknown, status = 200) =>
      new Response(JSON.stringify(body), { status });
    if (url.endsWith("/sessions") && init?.method === "POST") {
      if (this.opening !== null)
        this.turns.push({ role: "system", text: this.opening });
      return json({
        id: "s1",
        disclosure: "machine agent",
        preset: "default",
        opening: this.opening,
      });
    }
    if (url.endsWith("/messages")) {
      this.messagePosts += 1;
      if (this.busyResponses > 0) {
        this.busyResponses -= 1;
        return json({ detail: "a reply is already in flight" }, 409);
      }
      const userTurns = this.turns.filter((t) => t.role === "user").length;
      if (userTurns >= this.fullAfter)
        return json({ detail: "session is full; start a new session" }, 409);
      const { text } = JSON.parse(init!.body as string);
      this.turns.push({ role: "user", text });
      this.turns.push({ role: "system", text: this.replyFor(text) });
      return json({ reply: this.replyFor(text), turn_index: this.turns.length - 1 });
    }
    if (url.endsWith("/history")) {
      return json({
        turns: this.turns.map((t, index) => ({ ...t, index })),
        full: false,
      });
    }
    if (url.endsWith("/export")) {
      return new Response(JSON.stringify({ id: "s1" }) + "\n", { status: 200 });
    }
    throw new Error(`unexpected request ${url}`);
  };
}

function makeSession(service: FakeService): ChatSession {
  return new ChatSession(new ChatApi("http://svc", service.fetchFn), 1);
}

const settle = () => new Promise((r) => setTimeout(r, 20));

describe("start_chat", () => {
  it("default preset gives an empty thread with the disclosure", async () => {
    const session = makeSession(new FakeService());
    await session.start("default");
    expect(session.sessionId).toBe("s1");
    expect(session.disclosure).toBe("machine agent");
    expect(session.bubbles).toEqual([]);
    expect(session.status).toBe("online");
  });

  it("system-first preset renders an opening system bubble", async () => {
    const service = new FakeService();
    service.opening = "hello, can I interest you in a cause?";
    const session = makeSession(service);
    await session.start("persuasion");
    expect(session.bubbles).toHaveLength(1);
    expect(session.bubbles[0].role).toBe("system");
  });

  it("offline service leaves no session and flags the status", async () => {
    const service = new FakeService();
    service.offline = true;
    const session = makeSession(service);
    await session.start("default");
    expect(session.sessionId).toBeNull();
    expect(session.status).toBe("offline");
    expect(session.notice).not.toBe("");
  });
});

describe("send_message", () => {
  it("a round trip adds exactly two bubbles", async () => {
    const session = makeSession(new FakeService());
    await session.start("default");
    session.send("hello there");
    await settle();
    expect(session.bubbles.map((b) => b.role)).toEqual(["user", "system"]);
    expect(session.bubbles[1].text).toBe("re: hello there");
    expect(session.bubbles.every((b) => !b.pending)).toBe(true);
  });

  it("empty input cannot be sent", async () => {
    const session = makeSession(new FakeService());
    await session.start("default");
    expect(session.canSend("")).toBe(false);
    expect(session.canSend("   ")).toBe(false);
    session.send("  ");
    await settle();
    expect(session.bubbles).toEqual([]);
  });

  it("rapid double-send queues the second message, order preserved", async () => {
    const service = new FakeService();
    const session = makeSession(service);
    await session.start("default");
    session.send("first");
    session.send("second");
    // both optimistic bubbles visible immediately
    expect(session.bubbles.filter((b) => b.pending)).toHaveLength(2);
    await settle();
    expect(session.bubbles.map((b) => [b.role, b.text])).toEqual([
      ["user", "first"],
      ["system", "re: first"],
      ["user", "second"],
      ["system", "re: second"],
    ]);
    expect(service.turns.map((t) => t.text)).toEqual([
      "first",
      "re: first",
      "second",
      "re: second",
    ]);
  });

  it("retries while the server reports busy", async () => {
    const service = new FakeService();
    service.busyResponses = 2;
    const session = makeSession(service);
    await session.start("default");
    session.send("patient message");
    await settle();
    expect(service.messagePosts).toBe(3); // two busy rejections + success
    expect(session.bubbles.map((b) => b.role)).toEqual(["user", "system"]);
  });

  it("capacity-full locks the thread with a notice", async () => {
    const service = new FakeService();
    service.fullAfter = 1;
    const session = makeSession(service);
    await session.start("default");
    session.send("fits");
    await settle();
    session.send("does not fit");
    await settle();
    expect(session.locked).toBe(true);
    expect(session.notice).toContain("full");
    expect(session.inputDisabled).toBe(true);
    // the rejected message's optimistic bubble is gone
    expect(session.bubbles.map((b) => b.text)).toEqual(["fits", "re: fits"]);
  });

  it("rendered history equals server history after every exchange", async () => {
    const service = new FakeService();
    const session = makeSession(service);
    await session.start("default");
    for (const text of ["one", "two", "three"]) {
      session.send(text);
      await settle();
      expect(session.bubbles.map((b) => [b.role, b.text])).toEqual(
        service.turns.map((t) => [t.role, t.text]),
      );
      expect(session.bubbles.map((b) => b.turnIndex)).toEqual(
        service.turns.map((_, i) => i),
      );
    }
  });
});

describe("export_transcript", () => {
  it("returns the service bytes verbatim", async () => {
    const session = makeSession(new FakeService());
    await session.start("default");
    expect(await session.exportTranscript()).toBe('{"id":"s1"}\n');
  });

  it("fails without a session", async () => {
    const service = new FakeService();
    service.offline = true;
    const session = makeSession(service);
    await session.start("default");
    await expect(session.exportTranscript()).rejects.toThrow("no active");
  });
});

describe("sampler controls", () => {
  it("mirror the known presets", () => {
    expect(controlsForPreset("camrest")).toEqual({
      preset: "camrest",
      topP: 0.2,
      temperature: 0.7,
    });
    expect(controlsForPreset("persuasion").topP).toBe(0.9);
    expect(controlsForPreset("unknown").topP).toBe(1.0);
  });

  it("reflect the server-acknowledged preset after start", async () => {
    const session = makeSession(new FakeService());
    session.controls = controlsForPreset("camrest");
    await session.start("camrest");
    // fake service acknowledges "default"; controls follow the server
    expect(session.controls.preset).toBe("default");
  });
});
