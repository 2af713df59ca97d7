import { describe, expect, it } from "vitest";

import { SSEParser } from "../src/sse.js";

describe("SSEParser", () => {
  it("parses complete event blocks", () => {
    const parser = new SSEParser();
    const events = parser.push(
      'event: step\ndata: {"t": 0.1, "V": 2.5}\n\n' +
      'event: converged\ndata: {"t": 1.0}\n\n');
    expect(events).toHaveLength(2);
    expect(events[0].event).toBe("step");
    expect((events[0].data as { V: number }).V).toBe(2.5);
    expect(events[1].event).toBe("converged");
  });

  it("buffers partial chunks across pushes", () => {
    const parser = new SSEParser();
    expect(parser.push("event: step\nda")).toHaveLength(0);
    expect(parser.push('ta: {"t": 0}\n')).toHaveLength(0);
    const events = parser.push("\nevent: perturb\n");
    expect(events).toHaveLength(1);
    expect(events[0].event).toBe("step");
    const tail = parser.push('data: {"delta": [1, 0]}\n\n');
    expect(tail).toHaveLength(1);
    expect(tail[0].event).toBe("perturb");
  });

  it("defaults the event name to message", () => {
    const events = new SSEParser().push("data: 42\n\n");
    expect(events[0].event).toBe("message");
    expect(events[0].data).toBe(42);
  });

  it("passes through non-JSON data as text", () => {
    const events = new SSEParser().push("data: hello world\n\n");
    expect(events[0].data).toBe("hello world");
  });

  it("ignores blocks without data", () => {
    expect(new SSEParser().push("event: ping\n\n")).toHaveLength(0);
  });
});
