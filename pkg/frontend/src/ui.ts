/** DOM wiring for the single-page chat client.
 *
 * All behavior lives in state.ts/api.ts; this module only renders state and
 * forwards events, so the unit-testable surface stays DOM-free.
 */

import { ChatApi } from "./api.js";
import { ChatSession, controlsForPreset } from "./state.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

export function mount(baseUrl: string): ChatSession {
  const api = new ChatApi(baseUrl);
  const session = new ChatSession(api);

  const thread = $<HTMLDivElement>("thread");
  const input = $<HTMLInputElement>("message-input");
  const sendButton = $<HTMLButtonElement>("send-button");
  const startButton = $<HTMLButtonElement>("start-button");
  const exportButton = $<HTMLButtonElement>("export-button");
  const presetSelect = $<HTMLSelectElement>("preset-select");
  const topP = $<HTMLInputElement>("top-p");
  const temperature = $<HTMLInputElement>("temperature");
  const disclosure = $<HTMLDivElement>("disclosure");
  const statusBadge = $<HTMLSpanElement>("status");
  const notice = $<HTMLDivElement>("notice");

  function render(): void {
    thread.replaceChildren(
      ...session.bubbles.map((bubble) => {
        const el = document.createElement("div");
        el.className =
          `bubble ${bubble.role}` + (bubble.pending ? " pending" : "");
        el.textContent = bubble.text === "" ? "…" : bubble.text;
        return el;
      }),
    );
    thread.scrollTop = thread.scrollHeight;
    statusBadge.textContent = session.status;
    statusBadge.className = `status ${session.status}`;
    disclosure.textContent = session.disclosure;
    disclosure.hidden = session.disclosure === "";
    notice.textContent = session.notice;
    notice.hidden = session.notice === "";
    input.disabled = session.inputDisabled;
    sendButton.disabled =
      session.inputDisabled || input.value.trim().length === 0;
    exportButton.disabled = session.sessionId === null;
    topP.value = String(session.controls.topP);
    temperature.value = String(session.controls.temperature);
    $<HTMLSpanElement>("top-p-value").textContent = topP.value;
    $<HTMLSpanElement>("temperature-value").textContent = temperature.value;
  }

  session.onChange(render);

  startButton.addEventListener("click", () => {
    void session.start(presetSelect.value);
  });

  presetSelect.addEventListener("change", () => {
    // sliders mirror the preset; server config is fixed per session, so
    // changes take effect when the next session starts
    session.controls = controlsForPreset(presetSelect.value);
    render();
  });

  function submit(): void {
    const text = input.value;
    if (!session.canSend(text)) return;
    session.send(text);
    input.value = "";
    render();
  }

  sendButton.addEventListener("click", submit);
  input.addEventListener("keydown", (event) => {
    if (event.key === "Enter") submit();
  });
  input.addEventListener("input", render);

  exportButton.addEventListener("click", () => {
    void session.exportTranscript().then((jsonl) => {
      const blob = new Blob([jsonl], { type: "application/jsonl" });
      const link = document.createElement("a");
      link.href = URL.createObjectURL(blob);
      link.download = `${session.sessionId}.jsonl`;
      link.click();
      URL.revokeObjectURL(link.href);
    });
  });

  render();
  return session;
}

declare global {
  interface Window {
    chatSession?: ChatSession;
  }
}

if (typeof document !== "undefined" && document.getElementById("thread")) {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "http://localhost:8000";
  window.chatSession = mount(base);
}
