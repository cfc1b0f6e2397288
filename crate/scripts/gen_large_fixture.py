#!/usr/bin/env python3
"""Emit a ~500-line Solidity contract used by the throughput tests."""
import sys

lines = [
    "// SPDX-License-Identifier: MIT",
    "pragma solidity ^0.8.0;",
    "",
    "contract LargeLedger {",
    "    struct Entry {",
    "        address who;",
    "        uint256 amount;",
    "    }",
    "",
    "    Entry[] public entries;",
    "    mapping(address => uint256) public credit;",
]
for i in range(20):
    lines.append(f"    uint256 public slot{i};")
lines.append("")
for i in range(20):
    lines += [
        f"    function deposit{i}() external payable {{",
        f"        uint256 a{i} = msg.value;",
        f"        credit[msg.sender] += a{i};",
        f"        slot{i} += a{i};",
        f"        entries.push(Entry(msg.sender, a{i}));",
        "    }",
        "",
        f"    function settle{i}(uint256 n) external {{",
        f"        uint256 paid = 0;",
        f"        for (uint256 k = 0; k < n && k < entries.length; k++) {{",
        f"            if (entries[k].amount > slot{i}) {{",
        f"                break;",
        f"            }}",
        f"            paid += entries[k].amount;",
        f"        }}",
        f"        slot{i} -= paid;",
        "    }",
        "",
        f"    function pure{i}(uint256 x) public pure returns (uint256) {{",
        f"        uint256 y = x * {i + 3};",
        f"        return y + {i};",
        "    }",
        "",
    ]
lines.append("}")
sys.stdout.write("\n".join(lines) + "\n")
