/** Minimal fetch-based server-sent-events reader (browser and node 20). */

export interface SSEEvent {
  event: string;
  data: unknown;
}

/**
 * Incremental SSE parser. Feed it raw text chunks; it returns completed
 * events and keeps the unfinished remainder internally.
 */
export class SSEParser {
  private buffer = "";

  push(chunk: string): SSEEvent[] {
    this.buffer += chunk;
    const events: SSEEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      const ev = parseBlock(block);
      if (ev) events.push(ev);
    }
    return events;
  }
}

function parseBlock(block: string): SSEEvent | null {
  let event = "message";
  const dataLines: string[] = [];
  for (const line of block.split("\n")) {
    if (line.startsWith("event:")) event = line.slice(6).trim();
    else if (line.startsWith("data:")) dataLines.push(line.slice(5).trim());
  }
  if (!dataLines.length) return null;
  const raw = dataLines.join("\n");
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    data = raw;
  }
  return { event, data };
}

/** Stream SSE events from a URL until the server closes the connection. */
export async function* sseStream(
  url: string,
  fetchImpl: typeof fetch = fetch,
): AsyncGenerator<SSEEvent> {
  const resp = await fetchImpl(url, { headers: { accept: "text/event-stream" } });
  if (!resp.ok || !resp.body) {
    throw new Error(`stream request failed: ${resp.status}`);
  }
  const reader = resp.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SSEParser();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) return;
    for (const ev of parser.push(decoder.decode(value, { stream: true }))) {
      yield ev;
    }
  }
}
